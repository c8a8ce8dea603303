import math

import numpy as np
import pytest

from contextedit.config import Phase, Split, TokenLabel, TrainConfig
from contextedit.dataset import build_split, load_split
from contextedit.encoders import ProxyClip
from contextedit.errors import ContractError, DimensionError
from contextedit.metrics import aggregate, cosine, dice, episode_metrics, evaluate, iou
from contextedit.model import EditingModel
from contextedit.training import train
from contextedit.world import gen_episode


def test_mask_overlap_scores():
    a, b = np.zeros((8, 8)), np.zeros((8, 8))
    assert iou(a, b) == 1.0 and dice(a, b) == 1.0
    a[:4] = 1.0
    assert iou(a, b) == 0.0 and dice(a, b) == 0.0
    b[:2] = 1.0
    assert iou(a, b) == 0.5
    assert dice(a, b) == pytest.approx(2 / 3)
    with pytest.raises(DimensionError):
        iou(a, np.zeros((4, 4)))


def test_cosine_of_a_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)


def test_perfect_edit(episodes):
    episode = next(ep for ep in episodes if any(ep.applicable))
    labels = [TokenLabel.MASK if ins.applicable else TokenLabel.NEG for ins in episode.instructions]
    masks = [ins.target_mask for ins in episode.instructions]
    values = episode_metrics(episode, episode.goal_image, masks, labels, ProxyClip())
    assert values["l1"] == 0.0 and values["l2"] == 0.0
    assert values["sim_i"] == pytest.approx(1.0, abs=1e-12)
    assert values["token_accuracy"] == 1.0
    assert values["iou"] == 1.0 and values["dice"] == 1.0
    assert values["masked_l1"] == 0.0


def test_pixel_errors_match_a_direct_sum(episodes, rng):
    episode = episodes[0]
    output = rng.random(episode.goal_image.shape)
    labels = [TokenLabel.NEG] * len(episode.instructions)
    masks = [np.zeros((64, 64))] * len(episode.instructions)
    values = episode_metrics(episode, output, masks, labels, ProxyClip())

    total_abs = total_sq = 0.0
    for out, goal in zip(output.reshape(-1), episode.goal_image.reshape(-1)):
        total_abs += abs(out - goal)
        total_sq += (out - goal) ** 2
    assert values["l1"] == pytest.approx(total_abs / output.size, rel=1e-12)
    assert values["l2"] == pytest.approx(total_sq / output.size, rel=1e-12)


def test_aggregate_skips_missing_values():
    rows = [
        {"iou": 1.0, "masked_l1": math.nan, "edit_gain": 1.0},
        {"iou": math.nan, "masked_l1": math.nan, "edit_gain": 0.0},
        {"iou": 0.5, "masked_l1": math.nan, "edit_gain": 1.0},
    ]
    assert aggregate(rows) == {
        "iou": 0.75,
        "masked_l1": 0.0,
        "edit_gain_rate": pytest.approx(2 / 3),
        "episodes": 3.0,
    }
    with pytest.raises(ContractError):
        aggregate([])


def test_evaluate(model, episodes):
    with pytest.raises(ContractError):
        evaluate(model, [])
    overall, per_task = evaluate(model, episodes)
    assert overall["episodes"] == 4.0
    assert set(per_task) == {"single", "multi", "context"}
    assert per_task["context"]["episodes"] == 2.0
    assert 0.0 <= overall["token_accuracy"] <= 1.0
    assert overall["tokens_total"] == sum(len(ep.instructions) for ep in episodes)
    assert overall["token_accuracy"] == overall["tokens_correct"] / overall["tokens_total"]


def test_token_accuracy_counts_every_instruction_once():
    rows = [
        {"token_accuracy": 1.0, "tokens_correct": 1.0, "tokens_total": 1.0},
        {"token_accuracy": 0.5, "tokens_correct": 2.0, "tokens_total": 4.0},
    ]
    summary = aggregate(rows)
    assert summary["token_accuracy"] == pytest.approx(3 / 5)
    assert (summary["tokens_correct"], summary["tokens_total"]) == (3.0, 5.0)


def test_dice_of_half_overlapping_masks():
    a, b = np.zeros((64, 64)), np.zeros((64, 64))
    a[8:24, 8:24] = 1.0
    b[8:24, 16:32] = 1.0
    intersection = sum(1 for y in range(64) for x in range(64) if a[y, x] and b[y, x])
    assert intersection == 128
    assert dice(a, b) == pytest.approx(2 * intersection / (a.sum() + b.sum()), abs=1e-12)
    assert dice(a, b) == pytest.approx(0.5, abs=1e-12)


def test_edit_gain_rate():
    proxy = ProxyClip()
    rows = []
    for seed in range(40):
        episode = gen_episode(seed)
        region = episode.edit_region() > 0
        output = episode.scene.image.copy()
        output[region] = 0.9 * episode.goal_image[region] + 0.1 * episode.scene.image[region]
        labels = [TokenLabel.MASK if ins.applicable else TokenLabel.NEG for ins in episode.instructions]
        rows.append(episode_metrics(episode, output, [ins.target_mask for ins in episode.instructions], labels, proxy))
    assert aggregate(rows)["edit_gain_rate"] >= 0.9


@pytest.mark.slow
def test_trained_edits_beat_the_unedited_input(tmp_path):
    build_split(tmp_path, seed=0, counts={Split.TRAIN: 256, Split.VAL: 32, Split.TEST: 64})
    config = TrainConfig()
    model = EditingModel(config)
    train(Phase.MAIN, model, load_split(tmp_path, Split.TRAIN), config)
    overall, _ = evaluate(model, load_split(tmp_path, Split.VAL), config.guidance)
    assert overall["edit_gain_rate"] >= 0.9
