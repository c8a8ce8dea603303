"""Episode files: one TOML record per episode plus PPM/PGM pixel payloads."""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w
from PIL import Image, UnidentifiedImageError
from rich.progress import Progress

from contextedit.config import (
    DEFAULT_SPLIT_COUNTS,
    REFERENCE_CATEGORY_SHARES,
    REFERENCE_SPLIT_TOTALS,
    Category,
    FileType,
    SceneConfig,
    Split,
    Task,
)
from contextedit.errors import ContractError, DatasetError
from contextedit.world import Episode, Instruction, Scene, SceneObject, gen_episode

MANIFEST_NAME = "manifest.toml"
SPLIT_IDS = {Split.TRAIN: 0, Split.VAL: 1, Split.TEST: 2}


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: Path) -> None:
    """Write an H x W x 3 image as PPM or an H x W mask as PGM, values in [0, 1]."""
    Image.fromarray(to_bytes(image)).save(path, format="PPM")


def load_image(path: Path, *, gray: bool = False) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L" if gray else "RGB"), dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError) as e:
        raise DatasetError(f"Can't read image '{path}': {e}") from e
    return pixels / 255.0


def episode_stem(index: int) -> str:
    return f"{index:05d}"


def _instruction_record(ins: Instruction) -> dict[str, Any]:
    record: dict[str, Any] = {
        "text": ins.text,
        "category": ins.category.value,
        "applicable": ins.applicable,
        "subject": ins.subject,
    }
    # TOML has no null, so absent fields are left out
    optional = {
        "color": ins.color,
        "replacement": ins.replacement,
        "region": list(ins.region) if ins.region else None,
        "box": list(ins.box) if ins.box else None,
        "new_box": list(ins.new_box) if ins.new_box else None,
    }
    record.update({key: value for key, value in optional.items() if value is not None})
    return record


def save_episode(episode: Episode, directory: Path, stem: str) -> Path:
    """Write `stem.toml`, `stem-scene.ppm`, `stem-goal.ppm` and one `stem-mask{i}.pgm` per instruction."""
    directory.mkdir(parents=True, exist_ok=True)
    record = {
        "seed": episode.seed,
        "task": episode.task.value,
        "prompt": " ".join(episode.prompt),
        "source_description": " ".join(episode.source_description),
        "goal_description": " ".join(episode.goal_description),
        "meta": dict(episode.meta),
        "objects": [
            {"label": obj.label, "color": obj.color, "box": list(obj.box)}
            for obj in episode.scene.objects
        ],
        "instructions": [_instruction_record(ins) for ins in episode.instructions],
    }
    path = directory / f"{stem}{FileType.TOML.value}"
    with path.open("wb") as f:
        tomli_w.dump(record, f)
    save_image(episode.scene.image, directory / f"{stem}-scene{FileType.PPM.value}")
    save_image(episode.goal_image, directory / f"{stem}-goal{FileType.PPM.value}")
    for i, ins in enumerate(episode.instructions):
        save_image(ins.target_mask, directory / f"{stem}-mask{i}{FileType.PGM.value}")
    return path


def load_episode(path: Path) -> Episode:
    """Read an episode back from its TOML record; pixel payloads are found next to it."""
    try:
        with path.open("rb") as f:
            record = tomllib.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"Episode file '{path}' does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise DatasetError(f"Can't parse episode file '{path}': {e}") from e

    directory, stem = path.parent, path.stem
    try:
        objects = [
            SceneObject(obj["label"], obj["color"], tuple(obj["box"])) for obj in record["objects"]
        ]
        instructions = []
        for i, ins in enumerate(record["instructions"]):
            instructions.append(
                Instruction(
                    words=ins["text"].split(),
                    category=Category(ins["category"]),
                    applicable=ins["applicable"],
                    target_mask=load_image(directory / f"{stem}-mask{i}{FileType.PGM.value}", gray=True),
                    subject=ins["subject"],
                    color=ins.get("color"),
                    replacement=ins.get("replacement"),
                    region=tuple(ins["region"]) if "region" in ins else None,
                    box=tuple(ins["box"]) if "box" in ins else None,
                    new_box=tuple(ins["new_box"]) if "new_box" in ins else None,
                )
            )
        if not instructions:
            raise DatasetError(f"Episode '{path}' has no instructions")
        return Episode(
            scene=Scene(
                image=load_image(directory / f"{stem}-scene{FileType.PPM.value}"),
                objects=objects,
            ),
            instructions=instructions,
            goal_image=load_image(directory / f"{stem}-goal{FileType.PPM.value}"),
            goal_description=record["goal_description"].split(),
            source_description=record["source_description"].split(),
            task=Task(record["task"]),
            seed=record["seed"],
            meta=dict(record.get("meta", {})),
        )
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Episode file '{path}' is incomplete or malformed: {e}") from e


def episode_seed(seed: int, split: Split, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLIT_IDS[split], index]).generate_state(1)[0])


def build_split(
    out_dir: Path,
    seed: int,
    counts: dict[Split, int] = DEFAULT_SPLIT_COUNTS,
    config: SceneConfig = SceneConfig(),
    progress: Progress | None = None,
) -> dict[Split, int]:
    """
    Generate train/val/test episode directories under `out_dir`.

    Every episode seed is derived from (`seed`, split, index), so the same
    arguments always produce byte-identical files. A `manifest.toml` records the
    counts along with the reference dataset's sizes, which only serve as provenance.
    """
    for split in Split:
        if counts.get(split, 0) < 1:
            raise ContractError(f"Split '{split.value}' needs at least one episode")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        task_ids = {}
        if progress is not None:
            task_ids = {
                split: progress.add_task(f"Generating {split.value}", total=counts[split])
                for split in Split
            }
        tasks: dict[str, dict[str, int]] = {}
        for split in Split:
            histogram = {task.value: 0 for task in Task}
            for index in range(counts[split]):
                episode = gen_episode(episode_seed(seed, split, index), config=config)
                save_episode(episode, out_dir / split.value, episode_stem(index))
                histogram[episode.task.value] += 1
                if progress is not None:
                    progress.advance(task_ids[split])
            tasks[split.value] = histogram

        manifest = {
            "seed": seed,
            "counts": {split.value: counts[split] for split in Split},
            "tasks": tasks,
            "provenance": {
                "split_totals": dict(REFERENCE_SPLIT_TOTALS),
                "category_shares": {c.value: share for c, share in REFERENCE_CATEGORY_SHARES.items()},
            },
        }
        with (out_dir / MANIFEST_NAME).open("wb") as f:
            tomli_w.dump(manifest, f)
    except OSError as e:
        raise DatasetError(f"Couldn't write dataset to '{out_dir}': {e}") from e
    return {split: counts[split] for split in Split}


def split_files(data_dir: Path, split: Split) -> list[Path]:
    split_dir = data_dir / split.value
    if not split_dir.is_dir():
        raise DatasetError(f"'{split_dir}' is not a directory")
    return sorted(split_dir.glob(f"*{FileType.TOML.value}"))


def load_split(data_dir: Path, split: Split) -> list[Episode]:
    """Load every episode of a split in file-name order."""
    episodes = [load_episode(path) for path in split_files(data_dir, split)]
    if not episodes:
        raise DatasetError(f"Split '{split.value}' in '{data_dir}' contains no episodes")
    return episodes
