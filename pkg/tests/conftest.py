from pathlib import Path

import numpy as np
import pytest

from contextedit.config import Split, Task, TrainConfig
from contextedit.dataset import build_split
from contextedit.model import EditingModel
from contextedit.world import Episode, gen_episode

TINY_COUNTS = {Split.TRAIN: 4, Split.VAL: 2, Split.TEST: 3}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        main_steps=2,
        surrogate_steps=2,
        refine_steps=2,
        batch_size=2,
        log_every=1,
        surrogate_variants=["ground_truth", "empty"],
    )


@pytest.fixture
def model(tiny_config: TrainConfig) -> EditingModel:
    return EditingModel(tiny_config)


@pytest.fixture
def context_episode() -> Episode:
    return gen_episode(7, Task.CONTEXT)


@pytest.fixture
def episodes() -> list[Episode]:
    tasks = [Task.SINGLE, Task.MULTI, Task.CONTEXT, Task.CONTEXT]
    return [gen_episode(seed, task) for seed, task in enumerate(tasks)]


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("data")
    build_split(out, seed=0, counts=TINY_COUNTS)
    return out


def force_negative(model: EditingModel) -> None:
    """Bias the classifier so every output token is [NEG]."""
    model.head.classifier.bias.data = np.array([-1e3, 1e3])
