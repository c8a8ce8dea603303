import numpy as np
import pytest

from contextedit.checkpoint import parameter_digest
from contextedit.config import Phase, Split, TrainConfig
from contextedit.dataset import build_split, load_split
from contextedit.errors import ContractError, PhaseOrderError
from contextedit.metrics import evaluate
from contextedit.model import EditingModel
from contextedit.numerics import Tensor, backward, no_grad
from contextedit.training import (
    EpisodeInputs,
    LossComponents,
    LossLog,
    check_phase_order,
    episode_components,
    loss_weights,
    main_loss,
    train,
)


def mean_main_loss(model: EditingModel, episodes) -> float:
    with no_grad():
        values = [
            main_loss(episode_components(model, EpisodeInputs.build(model, ep))[0], loss_weights(model.config)).item()
            for ep in episodes
        ]
    return float(np.mean(values))


def test_main_loss_is_the_weighted_sum():
    components = LossComponents(Tensor(0.1), Tensor(0.2), Tensor(0.3), Tensor(0.4))
    assert main_loss(components, (1.0, 1.0, 1.0, 1.0)).item() == pytest.approx(1.0, abs=1e-12)
    zeros = LossComponents(Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0))
    assert main_loss(zeros, (1.0, 2.0, 3.0, 4.0)).item() == 0.0


def test_main_loss_gradients_are_the_weights():
    leaves = [Tensor(v, requires_grad=True) for v in (0.5, 1.5, 0.25, 2.0)]
    backward(main_loss(LossComponents(*leaves), (2.0, 3.0, 4.0, 5.0)))
    assert [leaf.grad.item() for leaf in leaves] == [2.0, 3.0, 4.0, 5.0]


@pytest.mark.parametrize(
    "phase, completed",
    [
        (Phase.MAIN, []),
        (Phase.SURROGATE, [Phase.MAIN]),
        (Phase.REFINE, [Phase.MAIN, Phase.SURROGATE]),
    ],
)
def test_phase_order_accepts(phase, completed):
    check_phase_order(phase, completed)


@pytest.mark.parametrize(
    "phase, completed",
    [
        (Phase.MAIN, [Phase.MAIN]),
        (Phase.SURROGATE, []),
        (Phase.REFINE, [Phase.MAIN]),
        (Phase.REFINE, [Phase.SURROGATE, Phase.MAIN]),
    ],
)
def test_phase_order_rejects(phase, completed):
    with pytest.raises(PhaseOrderError):
        check_phase_order(phase, completed)


def test_training_needs_episodes(model, tiny_config):
    with pytest.raises(ContractError):
        train(Phase.MAIN, model, [], tiny_config)


def test_loss_log_averages_between_flushes():
    log = LossLog(every=2)
    for step, value in enumerate([1.0, 3.0, 5.0], start=1):
        log.add(step, {"loss": value})
    log.flush(3)
    assert log.entries == [{"step": 2.0, "loss": 2.0}, {"step": 3.0, "loss": 5.0}]


def test_main_phase_is_deterministic(tiny_config, episodes):
    digests = []
    for _ in range(2):
        model = EditingModel(tiny_config)
        result = train(Phase.MAIN, model, episodes, tiny_config)
        digests.append(parameter_digest(model))
    assert digests[0] == digests[1]
    assert len(result.losses) == tiny_config.main_steps
    assert {"token", "broadcast", "dice", "bce", "main", "denoise"} <= set(result.losses[0])


def test_main_phase_reduces_the_loss(episodes):
    config = TrainConfig(main_steps=10, batch_size=len(episodes), lr_main=1e-3, log_every=10)
    model = EditingModel(config)
    before = mean_main_loss(model, episodes)
    train(Phase.MAIN, model, episodes, config)
    assert mean_main_loss(model, episodes) < before


def test_surrogate_phase_only_updates_the_surrogate(model, tiny_config, episodes):
    others = {name: parameter_digest(getattr(model, name)) for name in ("head", "broadcaster", "decoder", "denoiser")}
    surrogate = parameter_digest(model.surrogate)
    result = train(Phase.SURROGATE, model, episodes, tiny_config, [Phase.MAIN], validation=episodes[:2])
    assert {name: parameter_digest(getattr(model, name)) for name in others} == others
    assert parameter_digest(model.surrogate) != surrogate
    assert {"train_mse", "train_baseline_mse", "val_mse", "val_baseline_mse"} <= set(result.metrics)


def test_refine_phase_keeps_the_surrogate_frozen(model, tiny_config, episodes):
    surrogate = parameter_digest(model.surrogate)
    denoiser = parameter_digest(model.denoiser)
    head = parameter_digest(model.head)
    result = train(
        Phase.REFINE, model, episodes, tiny_config, [Phase.MAIN, Phase.SURROGATE], validation=episodes[:2]
    )
    assert parameter_digest(model.surrogate) == surrogate
    assert parameter_digest(model.denoiser) == denoiser
    assert parameter_digest(model.head) != head
    assert not model.surrogate.trainable_parameters()
    assert np.isfinite(result.metrics["val_updated_loss"])
    assert np.isfinite(result.metrics["val_updated_loss_start"])
    assert {"updated", "predicted"} <= set(result.losses[0])


@pytest.mark.slow
def test_main_phase_learns_tokens_and_masks(tmp_path):
    build_split(tmp_path, seed=0, counts={Split.TRAIN: 256, Split.VAL: 32, Split.TEST: 64})
    config = TrainConfig()
    model = EditingModel(config)
    train(Phase.MAIN, model, load_split(tmp_path, Split.TRAIN), config)
    overall, _ = evaluate(model, load_split(tmp_path, Split.TEST), config.guidance)
    assert overall["token_accuracy"] >= 0.95
    assert overall["iou"] >= 0.5


@pytest.mark.slow
def test_surrogate_beats_the_constant_predictor(tmp_path):
    build_split(tmp_path, seed=0, counts={Split.TRAIN: 64, Split.VAL: 32, Split.TEST: 1})
    config = TrainConfig(main_steps=500)
    model = EditingModel(config)
    train(Phase.MAIN, model, load_split(tmp_path, Split.TRAIN), config)
    result = train(
        Phase.SURROGATE,
        model,
        load_split(tmp_path, Split.TRAIN),
        config,
        [Phase.MAIN],
        load_split(tmp_path, Split.VAL),
    )
    assert result.metrics["val_mse"] <= 0.5 * result.metrics["val_baseline_mse"]


@pytest.mark.slow
def test_refinement_lowers_the_validation_loss(tmp_path):
    build_split(tmp_path, seed=0, counts={Split.TRAIN: 64, Split.VAL: 32, Split.TEST: 1})
    config = TrainConfig(main_steps=500, refine_steps=500)
    model = EditingModel(config)
    episodes, validation = load_split(tmp_path, Split.TRAIN), load_split(tmp_path, Split.VAL)
    train(Phase.MAIN, model, episodes, config)
    train(Phase.SURROGATE, model, episodes, config, [Phase.MAIN], validation)
    result = train(Phase.REFINE, model, episodes, config, [Phase.MAIN, Phase.SURROGATE], validation)
    assert result.metrics["val_updated_loss"] < result.metrics["val_updated_loss_start"]
