"""Image, similarity and robustness metrics of edited episodes, overall and per task."""
from typing import Sequence

import numpy as np
from rich.progress import Progress

from contextedit.config import GuidanceConfig, TokenLabel
from contextedit.encoders import ProxyClip
from contextedit.errors import ContractError, DimensionError
from contextedit.model import EditingModel
from contextedit.world import Episode

DIRECTION_FLOOR = 1e-9  # Below this norm a change vector counts as no change
COUNT_KEYS = ("tokens_correct", "tokens_total")  # Summed, not averaged, across episodes


def iou(predicted: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of binary masks; two empty masks agree perfectly."""
    if predicted.shape != target.shape:
        raise DimensionError(f"Mask shapes differ: {predicted.shape} vs {target.shape}")
    p, g = predicted > 0.5, target > 0.5
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)


def dice(predicted: np.ndarray, target: np.ndarray) -> float:
    if predicted.shape != target.shape:
        raise DimensionError(f"Mask shapes differ: {predicted.shape} vs {target.shape}")
    p, g = predicted > 0.5, target > 0.5
    total = p.sum() + g.sum()
    return 1.0 if total == 0 else float(2.0 * np.logical_and(p, g).sum() / total)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a < DIRECTION_FLOOR or norm_b < DIRECTION_FLOOR:
        return 0.0
    return float(a @ b / (norm_a * norm_b))


def episode_metrics(
    episode: Episode,
    output: np.ndarray,
    masks: Sequence[np.ndarray],
    labels: Sequence[TokenLabel],
    proxy: ProxyClip,
) -> dict[str, float]:
    """
    Metrics of one edited episode.

    `masked_*` values are mean absolute errors inside the union of the
    applicable target masks; they're NaN when nothing is applicable.
    `iou` and `dice` average over applicable instructions only.
    """
    goal, source = episode.goal_image, episode.scene.image
    out_embed, goal_embed, source_embed = (proxy.embed_image(x) for x in (output, goal, source))
    goal_text = proxy.embed_text(episode.goal_description)
    source_text = proxy.embed_text(episode.source_description)

    region = episode.edit_region() > 0
    applicable = [i for i, ins in enumerate(episode.instructions) if ins.applicable]
    correct = [
        (label is TokenLabel.MASK) == ins.applicable for label, ins in zip(labels, episode.instructions)
    ]
    values = {
        "l1": float(np.mean(np.abs(output - goal))),
        "l2": float(np.mean((output - goal) ** 2)),
        "baseline_l1": float(np.mean(np.abs(source - goal))),
        "baseline_l2": float(np.mean((source - goal) ** 2)),
        "sim_i": float(out_embed @ goal_embed),
        "sim_t": float(goal_text @ out_embed),
        "sim_dir": cosine(out_embed - source_embed, goal_text - source_text),
        "token_accuracy": float(np.mean(correct)),
        "tokens_correct": float(sum(correct)),
        "tokens_total": float(len(correct)),
        "iou": float(np.mean([iou(masks[i], episode.instructions[i].target_mask) for i in applicable]))
        if applicable
        else float("nan"),
        "dice": float(np.mean([dice(masks[i], episode.instructions[i].target_mask) for i in applicable]))
        if applicable
        else float("nan"),
    }
    if region.any():
        values["masked_l1"] = float(np.mean(np.abs(output - goal)[region]))
        values["baseline_masked_l1"] = float(np.mean(np.abs(source - goal)[region]))
        values["edit_gain"] = float(values["masked_l1"] < values["baseline_masked_l1"])
    else:
        values["masked_l1"] = values["baseline_masked_l1"] = values["edit_gain"] = float("nan")
    return values


def aggregate(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    """
    Mean of every metric over rows, skipping NaN entries; `edit_gain` becomes `edit_gain_rate`.

    Token counts are summed instead, and `token_accuracy` becomes their ratio:
    a rate per instruction, not per episode.
    """
    if not rows:
        raise ContractError("Nothing to aggregate")
    summary = {}
    for key in rows[0]:
        column = np.array([row[key] for row in rows], dtype=np.float64)
        column = column[~np.isnan(column)]
        name = "edit_gain_rate" if key == "edit_gain" else key
        if key in COUNT_KEYS:
            summary[name] = float(column.sum())
        else:
            summary[name] = float(column.mean()) if column.size else 0.0
    if summary.get("tokens_total"):
        summary["token_accuracy"] = summary["tokens_correct"] / summary["tokens_total"]
    summary["episodes"] = float(len(rows))
    return summary


def evaluate(
    model: EditingModel,
    episodes: Sequence[Episode],
    guidance: GuidanceConfig | None = None,
    seed: int = 0,
    progress: Progress | None = None,
) -> tuple[dict[str, float], dict[str, dict[str, float]]]:
    """Edit every episode and return overall metrics and metrics per task."""
    if not episodes:
        raise ContractError("Can't evaluate an empty split")
    task = progress.add_task("Evaluating", total=len(episodes)) if progress is not None else None
    rows = []
    for i, episode in enumerate(episodes):
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        result = model.edit_episode(episode, sample_seed, guidance)
        rows.append(episode_metrics(episode, result.image, result.masks, result.labels, model.proxy))
        if task is not None:
            progress.advance(task)

    per_task = {}
    for name in dict.fromkeys(ep.task.value for ep in episodes):
        per_task[name] = aggregate([row for row, ep in zip(rows, episodes) if ep.task.value == name])
    return aggregate(rows), per_task
