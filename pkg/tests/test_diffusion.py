import math

import numpy as np
import pytest

from contextedit.config import GuidanceConfig
from contextedit.diffusion import (
    Denoiser,
    NoiseSchedule,
    cfg_combine,
    concat_masks,
    denoising_loss,
    guided_score,
    modulate_attention,
    sample,
)
from contextedit.encoders import TextEncoder, encode_latent
from contextedit.errors import ContractError, DimensionError
from contextedit.numerics import Tensor, backward, gradcheck, softmax
from contextedit.vocab import tokenize
from contextedit.world import gen_episode, gen_scene

PROMPT = "remove the bar <end> and make the circle red <end>"


def text() -> Tensor:
    return TextEncoder().embed_text(tokenize(PROMPT))


def box_mask(x: int, y: int, size: int) -> np.ndarray:
    mask = np.zeros((64, 64))
    mask[y : y + size, x : x + size] = 1.0
    return mask


def test_concat_masks_assigns_columns_by_alignment():
    masks = [box_mask(0, 0, 16), box_mask(32, 32, 8)]
    concatenated = concat_masks(masks, [1, 1, 0])
    assert concatenated.shape == (16, 16, 3)
    assert np.array_equal(concatenated[..., 0], concatenated[..., 1])
    assert concatenated[..., 2][:4, :4].all() and concatenated[..., 2].sum() == 16
    assert concatenated[..., 0][8:10, 8:10].all() and concatenated[..., 0].sum() == 4


def test_concat_masks_max_pools_partial_cells():
    mask = np.zeros((64, 64))
    mask[5, 5] = 1.0
    assert concat_masks([mask], [0])[1, 1, 0] == 1.0


def test_concat_masks_rejects_bad_alignment():
    with pytest.raises(ContractError):
        concat_masks([box_mask(0, 0, 8)], [0, 1])


def test_modulation_collapses_to_either_branch(rng):
    x, y = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(6, 5)))
    ones, zeros = np.ones((6, 5)), np.zeros((6, 5))
    scale = 1.0 / math.sqrt(32)
    assert np.allclose(modulate_attention(x, y, ones, 32).numpy(), softmax(x * scale).numpy(), atol=1e-12, rtol=0)
    assert np.allclose(modulate_attention(x, y, zeros, 32).numpy(), softmax(y * scale).numpy(), atol=1e-12, rtol=0)
    mixed = modulate_attention(x, y, (rng.random((6, 5)) > 0.5).astype(float), 32).numpy()
    assert np.allclose(mixed.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_modulation_checks_shapes(rng):
    with pytest.raises(DimensionError):
        modulate_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), np.ones((3, 2)), 32)


@pytest.mark.parametrize(
    "scales, branch",
    [((0.0, 0.0), "unconditional"), ((1.0, 0.0), "image_only"), ((1.0, 1.0), "full")],
)
def test_guidance_collapses_to_branches(scales, branch):
    rng = np.random.default_rng(0)
    denoiser = Denoiser(0)
    c_image = encode_latent(gen_scene(0).image)
    z = rng.standard_normal((16, 16, 4))
    mask = (rng.random((16, 16, 10)) > 0.5).astype(float)
    branches = {
        "unconditional": denoiser.score(z, 3, None, None).numpy(),
        "image_only": denoiser.score(z, 3, c_image, None).numpy(),
        "full": denoiser.score(z, 3, c_image, text(), mask).numpy(),
    }
    guided = guided_score(denoiser, z, 3, c_image, text(), mask, GuidanceConfig(*scales))
    assert np.max(np.abs(guided - branches[branch])) <= 1e-12


def test_cfg_combine_checks_shapes():
    with pytest.raises(DimensionError):
        cfg_combine(np.zeros(3), np.zeros(3), np.zeros(4), GuidanceConfig())


def test_zero_mask_severs_the_text_condition():
    rng = np.random.default_rng(1)
    denoiser = Denoiser(1)
    c_image = encode_latent(gen_scene(1).image)
    z = rng.standard_normal((16, 16, 4))
    severed = denoiser.score(z, 5, c_image, text(), np.zeros((16, 16, 10))).numpy()
    assert np.array_equal(severed, denoiser.score(z, 5, c_image, None).numpy())


@pytest.mark.parametrize("text_scale", [0.0, 7.5, 20.0])
def test_severed_sampling_equals_text_ablated_sampling(text_scale):
    denoiser = Denoiser(2)
    image = gen_scene(2).image
    guidance = GuidanceConfig(image_scale=1.5, text_scale=text_scale)
    severed = sample(denoiser, image, text(), np.zeros((16, 16, 10)), guidance, seed=9)
    ablated = sample(denoiser, image, None, None, guidance, seed=9)
    assert np.array_equal(severed, ablated)


def test_sampling_is_seeded():
    denoiser = Denoiser(3)
    image = gen_scene(3).image
    mask = np.ones((16, 16, 10))
    a = sample(denoiser, image, text(), mask, GuidanceConfig(), seed=4)
    b = sample(denoiser, image, text(), mask, GuidanceConfig(), seed=4)
    assert a.shape == (64, 64, 3) and np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_schedule_bounds():
    schedule = NoiseSchedule()
    assert np.all(np.diff(schedule.alphas_cumprod) < 0)
    with pytest.raises(ContractError):
        schedule.add_noise(np.zeros((16, 16, 4)), np.zeros((16, 16, 4)), schedule.timesteps)


def test_denoising_loss_trains_the_denoiser():
    episode = gen_episode(6)
    denoiser = Denoiser(6)
    ids = tokenize(episode.prompt)
    condition = TextEncoder().embed_text(ids)
    mask = np.ones((16, 16, len(ids)))
    loss = denoising_loss(
        denoiser, episode.scene.image, episode.goal_image, condition, mask, np.random.default_rng(0), 0.0
    )
    assert loss.shape == () and loss.item() > 0
    backward(loss)
    assert all(p.grad is not None for p in denoiser.trainable_parameters())


@pytest.mark.parametrize("seed", range(20))
def test_denoiser_gradients(seed):
    rng = np.random.default_rng(seed)
    denoiser = Denoiser(seed)
    c_image = encode_latent(gen_scene(seed).image)
    z = rng.standard_normal((16, 16, 4))
    noise = rng.standard_normal((16, 16, 4))
    mask = (rng.random((16, 16, 10)) > 0.5).astype(float)
    condition = text()
    t = int(rng.integers(10))

    def fn() -> Tensor:
        error = denoiser.score(z, t, c_image, condition, mask) - noise
        return (error * error).mean()

    assert gradcheck(fn, denoiser.trainable_parameters(), samples_per_tensor=2, rng=rng) <= 1e-4
