try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pytest

from contextedit.config import Split, Task
from contextedit.dataset import (
    MANIFEST_NAME,
    build_split,
    load_episode,
    load_image,
    load_split,
    save_episode,
    save_image,
    split_files,
)
from contextedit.errors import ContractError, DatasetError
from contextedit.world import gen_episode

from .conftest import TINY_COUNTS


def test_episode_files_restore_the_episode(tmp_path):
    episode = gen_episode(21, Task.CONTEXT)
    path = save_episode(episode, tmp_path, "00000")
    loaded = load_episode(path)

    assert np.array_equal(loaded.scene.image, episode.scene.image)
    assert np.array_equal(loaded.goal_image, episode.goal_image)
    assert loaded.scene.objects == episode.scene.objects
    assert loaded.prompt == episode.prompt
    assert loaded.goal_description == episode.goal_description
    assert loaded.task is episode.task and loaded.meta == episode.meta
    for a, b in zip(loaded.instructions, episode.instructions):
        for key in ("words", "category", "applicable", "box", "new_box"):
            assert getattr(a, key) == getattr(b, key)
        assert np.array_equal(a.target_mask, b.target_mask)


def test_mask_files_are_grayscale(tmp_path):
    mask = np.zeros((64, 64))
    mask[8:16, 8:24] = 1.0
    save_image(mask, tmp_path / "mask.pgm")
    assert (tmp_path / "mask.pgm").read_bytes().startswith(b"P5")
    assert np.array_equal(load_image(tmp_path / "mask.pgm", gray=True), mask)


def test_build_split_is_byte_identical(tmp_path):
    counts = {Split.TRAIN: 3, Split.VAL: 1, Split.TEST: 2}
    build_split(tmp_path / "a", seed=5, counts=counts)
    build_split(tmp_path / "b", seed=5, counts=counts)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_counts_are_per_split(tmp_path):
    written = build_split(tmp_path, seed=0, counts={Split.TRAIN: 2, Split.VAL: 1, Split.TEST: 1})
    assert written == {Split.TRAIN: 2, Split.VAL: 1, Split.TEST: 1}
    assert sum(len(split_files(tmp_path, split)) for split in Split) == 4
    for split in Split:
        for episode in load_split(tmp_path, split):
            assert episode.task in set(Task)


def test_splits_use_different_episodes(dataset_dir):
    train = load_split(dataset_dir, Split.TRAIN)
    test = load_split(dataset_dir, Split.TEST)
    assert len(train) == TINY_COUNTS[Split.TRAIN] and len(test) == TINY_COUNTS[Split.TEST]
    assert {ep.seed for ep in train}.isdisjoint(ep.seed for ep in test)


def test_manifest_records_counts_and_tasks(dataset_dir):
    with (dataset_dir / MANIFEST_NAME).open("rb") as f:
        manifest = tomllib.load(f)
    assert manifest["counts"] == {split.value: count for split, count in TINY_COUNTS.items()}
    assert sum(manifest["tasks"]["train"].values()) == TINY_COUNTS[Split.TRAIN]
    assert manifest["provenance"]["split_totals"]["context-aware"] == 2624


def test_build_split_rejects_empty_split(tmp_path):
    with pytest.raises(ContractError):
        build_split(tmp_path, seed=0, counts={Split.TRAIN: 1, Split.VAL: 0, Split.TEST: 1})


def test_missing_and_malformed_episodes(tmp_path):
    with pytest.raises(DatasetError):
        load_episode(tmp_path / "missing.toml")
    (tmp_path / "broken.toml").write_text("seed = [")
    with pytest.raises(DatasetError):
        load_episode(tmp_path / "broken.toml")
    (tmp_path / "partial.toml").write_text('seed = 1\ntask = "single"\n')
    with pytest.raises(DatasetError):
        load_episode(tmp_path / "partial.toml")


def test_empty_or_missing_split(tmp_path):
    with pytest.raises(DatasetError):
        split_files(tmp_path, Split.TRAIN)
    (tmp_path / "train").mkdir()
    with pytest.raises(DatasetError):
        load_split(tmp_path, Split.TRAIN)
