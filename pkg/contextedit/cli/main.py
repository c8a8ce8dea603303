import importlib.metadata
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import tomli_w
import typer
from rich import print

from contextedit.checkpoint import load_checkpoint, read_info, save_checkpoint
from contextedit.config import (
    DEFAULT_SPLIT_COUNTS,
    FileType,
    Phase,
    ProgressConfig,
    Split,
    load_train_config,
)
from contextedit.dataset import build_split, load_episode, load_image, load_split, save_image
from contextedit.errors import CheckpointError, ContextEditError, ContractError
from contextedit.metrics import evaluate
from contextedit.model import EditingModel
from contextedit.report import RunReport
from contextedit.training import check_phase_order, train
from contextedit.utils import ProgressPanel, file_size, metrics_table, summarize_blocks, summary_table

app = typer.Typer(no_args_is_help=True)


@contextmanager
def _reported_errors() -> Iterator[None]:
    """Turn library errors into one `contextedit-error[<code>]: <message>` line on stderr."""
    try:
        yield
    except ContextEditError as e:
        message = " ".join(str(e).split())
        typer.echo(f"contextedit-error[{e.code}]: {message}", err=True)
        raise typer.Exit(1)
    except OSError as e:
        typer.echo(f"contextedit-error[io]: {e}", err=True)
        raise typer.Exit(1)


def _version_callback(value: bool) -> None:
    if value:
        print(f"contextedit {importlib.metadata.version('contextedit')}")
        raise typer.Exit()


@app.callback()
def main(
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-v",
        help="Show the application's version and exit.",
        callback=_version_callback,
        is_eager=True,
    )
) -> None:
    """Context-aware instruction-guided image editing on synthetic scenes."""
    return


@app.command()
def gen_data(
    out_dir: Path = typer.Argument(..., help="Directory to write the train/val/test splits to."),
    seed: int = typer.Option(0, "--seed", "-s", help="Seed every episode is derived from."),
    n_train: int = typer.Option(DEFAULT_SPLIT_COUNTS[Split.TRAIN], "--train", help="Training episodes."),
    n_val: int = typer.Option(DEFAULT_SPLIT_COUNTS[Split.VAL], "--val", help="Validation episodes."),
    n_test: int = typer.Option(DEFAULT_SPLIT_COUNTS[Split.TEST], "--test", help="Test episodes."),
) -> None:
    """Generate a synthetic episode dataset. The same seed always gives identical files."""
    counts = {Split.TRAIN: n_train, Split.VAL: n_val, Split.TEST: n_test}
    with _reported_errors():
        with ProgressPanel("Generating episodes", *ProgressConfig.STEPS) as progress:
            written = build_split(out_dir, seed, counts, progress=progress)
    total = sum(written.values())
    print(f"Done! Saved {total} episode{'' if total == 1 else 's'} to: '{out_dir}'")


@app.command(name="train")
def train_phase(
    phase: Phase = typer.Argument(..., help="Training phase to run: main, surrogate or refine."),
    data_dir: Path = typer.Option(..., "--data", "-d", help="Dataset directory made by `gen-data`."),
    out: Path = typer.Option(..., "--out", "-o", help="Checkpoint file to write."),
    config_path: Optional[Path] = typer.Option(
        None, "--config", "-c", help="TOML file of `key = value` training settings."
    ),
    checkpoint: Optional[Path] = typer.Option(
        None,
        "--checkpoint",
        help="Checkpoint of the previous phase. Required for the surrogate and refine phases.",
    ),
    report_path: Optional[Path] = typer.Option(
        None, "--report", "-r", help="Where to write the run report. Defaults next to the checkpoint."
    ),
) -> None:
    """Run one training phase and write a checkpoint and run report."""
    with _reported_errors():
        config = load_train_config(config_path)
        if checkpoint is not None:
            model, info = load_checkpoint(checkpoint)
            config = config.resumed_from(info.config)
            model.config = config
            completed = info.phases
        elif phase is not Phase.MAIN:
            raise CheckpointError(f"Phase '{phase.value}' needs the previous phase's checkpoint (--checkpoint)")
        else:
            model, completed = EditingModel(config), []
        check_phase_order(phase, completed)

        episodes = load_split(data_dir, Split.TRAIN)
        validation = load_split(data_dir, Split.VAL) if phase is not Phase.MAIN else []
        print(f"Training phase '{phase.value}' on {len(episodes)} episodes\n")
        with ProgressPanel(f"Training: {phase.value}", *ProgressConfig.STEPS) as progress:
            result = train(phase, model, episodes, config, completed, validation, progress)

        phases = [*completed, phase]
        digest = save_checkpoint(model, out, phases)
        report = RunReport.create(
            "train",
            config,
            phases=[p.value for p in phases],
            losses={phase.value: result.losses},
            metrics=result.metrics,
        )
        report_path = report_path or out.with_suffix(f".{phase.value}{FileType.TOML.value}")
        report.save(report_path)

    print(f"Saved checkpoint to '{out}' ({file_size(out)}, sha256 {digest[:12]})")
    print(f"Saved run report to '{report_path}'")


@app.command()
def edit(
    checkpoint: Path = typer.Argument(..., help="Trained checkpoint."),
    episode: Optional[Path] = typer.Option(None, "--episode", "-e", help="Episode `.toml` file to edit."),
    image: Optional[Path] = typer.Option(None, "--image", help="`.ppm` image to edit."),
    instructions: Optional[List[str]] = typer.Option(
        None, "--instruction", "-i", help="Instruction for `--image`. Repeat for several instructions."
    ),
    out_dir: Path = typer.Option(Path("edited"), "--out-dir", "-o", help="Directory for the outputs."),
    seed: int = typer.Option(0, "--seed", "-s", help="Sampler seed."),
) -> None:
    """
    Edit an episode or an image. Writes the edited image, one mask per instruction and the token labels.
    """
    with _reported_errors():
        if (episode is None) == (image is None):
            raise ContractError("Pass exactly one of --episode and --image")
        if image is not None and not instructions:
            raise ContractError("--image needs at least one --instruction")
        model, _ = load_checkpoint(checkpoint)
        if episode is not None:
            result = model.edit_episode(load_episode(episode), seed)
        else:
            result = model.edit(load_image(image), list(instructions), seed)

        out_dir.mkdir(parents=True, exist_ok=True)
        save_image(result.image, out_dir / f"edited{FileType.PPM.value}")
        for i, mask in enumerate(result.masks):
            save_image(mask, out_dir / f"mask_{i}{FileType.PGM.value}")
        record = {
            "prompt": " ".join(result.analysis.prompt),
            "labels": [label.value for label in result.labels],
            "alignment": [int(a) for a in result.analysis.alignment],
            "seed": seed,
        }
        with (out_dir / f"labels{FileType.TOML.value}").open("wb") as f:
            tomli_w.dump(record, f)

    print(*(f"{i}: [bold]{label.value}[/]" for i, label in enumerate(result.labels)), sep="\n")
    print(f"Saved edited image and {len(result.masks)} mask{'' if len(result.masks) == 1 else 's'} to: '{out_dir}'")


@app.command(name="eval")
def eval_split(
    checkpoint: Path = typer.Argument(..., help="Trained checkpoint."),
    data_dir: Path = typer.Option(..., "--data", "-d", help="Dataset directory made by `gen-data`."),
    split: Split = typer.Option(Split.TEST, "--split", help="Split to evaluate."),
    report_path: Optional[Path] = typer.Option(
        None, "--report", "-r", help="Where to write the report. Defaults next to the checkpoint."
    ),
    seed: int = typer.Option(0, "--seed", "-s", help="Sampler seed."),
) -> None:
    """Edit every episode of a split and report image, similarity and mask metrics."""
    with _reported_errors():
        model, info = load_checkpoint(checkpoint)
        episodes = load_split(data_dir, split)
        with ProgressPanel(f"Evaluating: {split.value}", *ProgressConfig.STEPS) as progress:
            overall, per_task = evaluate(model, episodes, model.config.guidance, seed, progress)
        report = RunReport.create(
            "eval",
            model.config,
            phases=[p.value for p in info.phases],
            metrics=overall,
            per_task=per_task,
        )
        report_path = report_path or checkpoint.with_suffix(f".eval-{split.value}{FileType.TOML.value}")
        report.save(report_path)

    print(metrics_table(f"{split.value} ({len(episodes)} episodes)", overall, per_task))
    print(f"Saved report to '{report_path}'")


@app.command()
def inspect(
    checkpoint: Path = typer.Argument(..., help="Checkpoint to summarize."),
    blocks: bool = typer.Option(False, "--blocks", "-b", help="Also list every parameter block."),
) -> None:
    """Summarize the parameter blocks, completed phases and settings of a checkpoint."""
    with _reported_errors():
        info, tensors = read_info(checkpoint)

    shapes = {name: tuple(t.shape) for name, t in tensors.items()}
    phases = ", ".join(p.value for p in info.phases) or "none"
    print(f"[bold]{checkpoint}[/] ({file_size(checkpoint)})")
    print(f"Completed phases: {phases}")
    print(f"Checksum: {info.checksum}")
    print(f"Seed {info.config.seed}, LoRA rank {info.config.lora_rank} on {', '.join(info.config.lora_targets)}\n")
    print(summary_table("Parameters", summarize_blocks(shapes, info.trainable)))
    if blocks:
        print(
            *(
                f"{name} {list(shape)}{'' if info.trainable.get(name) else ' [dim](frozen)[/]'}"
                for name, shape in sorted(shapes.items())
            ),
            sep="\n",
        )
