"""
Toy latent denoiser with mask-modulated cross-attention, two-condition
classifier-free guidance and a deterministic DDIM sampler.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from contextedit.config import (
    BETA_END,
    BETA_START,
    EMBED_DIM,
    LATENT_BLOCK,
    LATENT_CHANNELS,
    LATENT_SIZE,
    TIMESTEPS,
    GuidanceConfig,
)
from contextedit.encoders import decode_latent, encode_latent
from contextedit.errors import ContractError, DimensionError
from contextedit.nn import Linear, Module, timestep_embedding
from contextedit.numerics import Tensor, concat, matmul, no_grad, silu, softmax

CELLS = LATENT_SIZE * LATENT_SIZE


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; `alphas_cumprod[t]` is the signal fraction at step t."""

    timesteps: int = TIMESTEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.timesteps)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def add_noise(self, z0: np.ndarray, noise: np.ndarray, t: int) -> np.ndarray:
        if not 0 <= t < self.timesteps:
            raise ContractError(f"Timestep {t} outside [0, {self.timesteps})")
        a = self.alphas_cumprod[t]
        return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise


def concat_masks(masks: Sequence[np.ndarray], alignment: Sequence[int]) -> np.ndarray:
    """
    Stack one mask column per text position: column j is the mask of output
    token alignment[j], max-pooled from image resolution to the 16 x 16 grid.
    """
    alignment = np.asarray(alignment, dtype=np.int64)
    if np.any(alignment < 0) or np.any(alignment >= len(masks)):
        raise ContractError(f"Alignment indices must lie in [0, {len(masks)}), got {alignment.tolist()}")
    pooled = [
        mask.reshape(LATENT_SIZE, LATENT_BLOCK, LATENT_SIZE, LATENT_BLOCK).max(axis=(1, 3))
        for mask in masks
    ]
    if not len(alignment):
        return np.zeros((LATENT_SIZE, LATENT_SIZE, 0))
    return np.stack([pooled[i] for i in alignment], axis=-1)


def modulate_attention(x: Tensor, y: Tensor | np.ndarray, mask: np.ndarray, dim: int) -> Tensor:
    """softmax((X * M + Y * (1 - M)) / sqrt(d)) over the text axis."""
    y_shape = y.shape
    if x.shape != y_shape or x.shape != mask.shape:
        raise DimensionError(f"Attention logits {x.shape}, {y_shape} and mask {mask.shape} must agree")
    blended = x * mask + y * (1.0 - mask)
    return softmax(blended * (1.0 / math.sqrt(dim)), axis=-1)


def _pooling_matrix() -> np.ndarray:
    """Averages 2 x 2 cells of the 16 x 16 grid into the 8 x 8 grid (row-major)."""
    coarse = LATENT_SIZE // 2
    rows, cols = np.divmod(np.arange(CELLS), LATENT_SIZE)
    pool = np.zeros((coarse * coarse, CELLS))
    pool[(rows // 2) * coarse + cols // 2, np.arange(CELLS)] = 0.25
    return pool


POOL = _pooling_matrix()
UNPOOL = (POOL > 0).T.astype(np.float64)


class Denoiser(Module):
    """
    U-Net-lite noise predictor on the 16 x 16 latent grid.

    [z_t, c_I] is projected per cell and shifted by a timestep embedding, goes
    down to 8 x 8 and back up with a skip connection, then passes one
    cross-attention block over the text embeddings. Keys, values and the output
    projection carry no bias, so the zero (null) text yields zero logits and
    zero values.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.in_proj = Linear(rng, 2 * LATENT_CHANNELS, dim)
        self.time_proj = Linear(rng, dim, dim)
        self.down = Linear(rng, dim, dim)
        self.up = Linear(rng, dim, dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, EMBED_DIM, dim, bias=False)
        self.v = Linear(rng, EMBED_DIM, dim, bias=False)
        self.o = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, LATENT_CHANNELS)

    def cross_attention(self, h: Tensor, text: Tensor, mask: np.ndarray) -> Tensor:
        """
        Text-conditioned attention under the concatenated mask.

        Logits blend the text keys (inside the mask) with the null-text keys
        (outside it); values are gated the same way, so cells outside the mask
        receive exactly the null-text contribution, which is zero.
        """
        q = self.q(h)
        null_text = Tensor(np.zeros(text.shape))
        x = matmul(q, self.k(text).T)
        y = matmul(q, self.k(null_text).T)
        weights = modulate_attention(x, y, mask, self.dim)
        inside = matmul(weights * mask, self.v(text))
        outside = matmul(weights * (1.0 - mask), self.v(null_text))
        return self.o(inside + outside)

    def score(
        self,
        z_t: np.ndarray | Tensor,
        t: int,
        c_image: np.ndarray | None,
        text: Tensor | None,
        mask: np.ndarray | None = None,
    ) -> Tensor:
        """
        Predicted noise. `c_image=None` drops the image condition, `text=None`
        drops the text condition (the attention block is skipped). Without a
        mask the whole grid attends to the text.
        """
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z.shape != (LATENT_SIZE, LATENT_SIZE, LATENT_CHANNELS):
            raise DimensionError(f"Expected a 16x16x4 latent, got {z.shape}")
        c = np.zeros(z.shape) if c_image is None else c_image
        h = self.in_proj(concat([z.reshape(CELLS, LATENT_CHANNELS), Tensor(c.reshape(CELLS, -1))], axis=1))
        h = silu(h + self.time_proj(Tensor(timestep_embedding(t, self.dim)[None, :])))
        mid = silu(self.down(matmul(Tensor(POOL), h)))
        h = h + matmul(Tensor(UNPOOL), self.up(mid))
        if text is not None and text.shape[0] > 0:
            m = text.shape[0]
            flat_mask = np.ones((CELLS, m)) if mask is None else _flatten_mask(mask, m)
            h = h + self.cross_attention(h, text, flat_mask)
        return self.out(h).reshape(LATENT_SIZE, LATENT_SIZE, LATENT_CHANNELS)


def _flatten_mask(mask: np.ndarray, m: int) -> np.ndarray:
    if mask.shape != (LATENT_SIZE, LATENT_SIZE, m):
        raise DimensionError(f"Expected a 16x16x{m} concatenated mask, got {mask.shape}")
    return mask.reshape(CELLS, m)


def cfg_combine(
    unconditional: np.ndarray,
    image_only: np.ndarray,
    full: np.ndarray,
    guidance: GuidanceConfig,
) -> np.ndarray:
    """e(0, 0) + s_I (e(c_I, 0) - e(0, 0)) + s_T (e(c_I, c_T) - e(c_I, 0))."""
    if not unconditional.shape == image_only.shape == full.shape:
        raise DimensionError("Guidance branches must have identical shapes")
    return (
        unconditional
        + guidance.image_scale * (image_only - unconditional)
        + guidance.text_scale * (full - image_only)
    )


def guided_score(
    denoiser: Denoiser,
    z_t: np.ndarray,
    t: int,
    c_image: np.ndarray,
    text: Tensor | None,
    mask: np.ndarray | None,
    guidance: GuidanceConfig,
) -> np.ndarray:
    with no_grad():
        unconditional = denoiser.score(z_t, t, None, None).numpy()
        image_only = denoiser.score(z_t, t, c_image, None).numpy()
        full = denoiser.score(z_t, t, c_image, text, mask).numpy()
    return cfg_combine(unconditional, image_only, full, guidance)


def sample(
    denoiser: Denoiser,
    image: np.ndarray,
    text: Tensor | None,
    mask: np.ndarray | None,
    guidance: GuidanceConfig,
    seed: int,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> np.ndarray:
    """
    Deterministic DDIM (eta = 0) edit of `image`.

    Starts from the image latent noised to the last step with seeded noise and
    walks the schedule back to step 0, then decodes.
    """
    c_image = encode_latent(image)
    noise = np.random.default_rng(seed).standard_normal(c_image.shape)
    alphas = schedule.alphas_cumprod
    z = schedule.add_noise(c_image, noise, schedule.timesteps - 1)
    for t in reversed(range(schedule.timesteps)):
        eps = guided_score(denoiser, z, t, c_image, text, mask, guidance)
        x0 = (z - math.sqrt(1.0 - alphas[t]) * eps) / math.sqrt(alphas[t])
        previous = alphas[t - 1] if t > 0 else 1.0
        z = math.sqrt(previous) * x0 + math.sqrt(1.0 - previous) * eps
    return decode_latent(z)


def denoising_loss(
    denoiser: Denoiser,
    source: np.ndarray,
    goal: np.ndarray,
    text: Tensor,
    mask: np.ndarray,
    rng: np.random.Generator,
    drop_probability: float,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> Tensor:
    """
    Noise-prediction MSE for editing `source` into `goal`.

    The image and text conditions are each dropped with `drop_probability` so
    the unconditional and image-only guidance branches are trained too.
    """
    c_image = encode_latent(source)
    z0 = encode_latent(goal)
    t = int(rng.integers(schedule.timesteps))
    noise = rng.standard_normal(z0.shape)
    drop_image = rng.random() < drop_probability
    drop_text = rng.random() < drop_probability
    z_t = schedule.add_noise(z0, noise, t)
    predicted = denoiser.score(
        z_t, t, None if drop_image else c_image, None if drop_text else text, mask
    )
    error = predicted - noise
    return (error * error).mean()
