"""
Frozen stand-in encoders: instruction text, image patches, the latent codec and
the proxy CLIP space used for scoring edits.
"""
import math

import numpy as np

from contextedit.config import (
    EMBED_DIM,
    ENCODER_SEED,
    GRID,
    IMAGE_SIZE,
    LATENT_BLOCK,
    LATENT_CHANNELS,
    LATENT_SIZE,
    PALETTE_DISTANCE,
    PATCH_GRID,
    PROXY_ANCHOR,
    PROXY_CLIP_SEED,
)
from contextedit.errors import DimensionError
from contextedit.nn import Linear, Module, attention, sinusoidal_positions
from contextedit.numerics import Tensor
from contextedit.vocab import (
    COLORS,
    CONNECTIVE,
    HORIZONTAL,
    LABEL_SHAPES,
    PALETTE,
    VERTICAL,
    VOCAB_SIZE,
    ShapeKind,
)

LUMINANCE = np.array([0.299, 0.587, 0.114])
PATCH_FEATURES = 15  # Patch mean plus four quadrant means, RGB each


def check_image(image: np.ndarray) -> None:
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DimensionError(
            f"Expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got shape {image.shape}"
        )


def block_mean(image: np.ndarray, block: int) -> np.ndarray:
    """Average non-overlapping `block` x `block` cells of an H x W x C array."""
    h, w, c = image.shape
    return image.reshape(h // block, block, w // block, block, c).mean(axis=(1, 3))


class TextEncoder(Module):
    """Token table, sinusoidal positions and one residual self-attention layer. Never trained."""

    def __init__(self, seed: int = ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.table = Tensor(rng.normal(0.0, 1.0, (VOCAB_SIZE, EMBED_DIM)))
        self.q = Linear(rng, EMBED_DIM, EMBED_DIM, bias=False)
        self.k = Linear(rng, EMBED_DIM, EMBED_DIM, bias=False)
        self.v = Linear(rng, EMBED_DIM, EMBED_DIM, bias=False)
        self.o = Linear(rng, EMBED_DIM, EMBED_DIM, bias=False)
        self.freeze()

    def embed_text(self, ids: list[int]) -> Tensor:
        """m x 32 text embeddings; an empty prompt gives a 0 x 32 matrix."""
        if not ids:
            return Tensor(np.zeros((0, EMBED_DIM)))
        x = self.table[np.asarray(ids)] + sinusoidal_positions(len(ids), EMBED_DIM)
        return x + self.o(attention(self.q(x), self.k(x), self.v(x), heads=1))


class VisionEncoder(Module):
    """Per-patch colour statistics mapped linearly to 32 dimensions. Never trained."""

    def __init__(self, seed: int = ENCODER_SEED + 1):
        rng = np.random.default_rng(seed)
        self.proj = Linear(rng, PATCH_FEATURES, EMBED_DIM)
        self.proj.bias = Tensor(rng.normal(0.0, 0.1, EMBED_DIM))
        self.freeze()

    @staticmethod
    def patch_features(image: np.ndarray) -> np.ndarray:
        check_image(image)
        patches = block_mean(image, GRID).reshape(-1, 3)
        quarters = block_mean(image, GRID // 2)  # 16 x 16 x 3
        sub = quarters.reshape(PATCH_GRID, 2, PATCH_GRID, 2, 3).transpose(0, 2, 1, 3, 4)
        return np.concatenate([patches, sub.reshape(PATCH_GRID * PATCH_GRID, 12)], axis=1) * 2.0 - 1.0

    def encode_vision(self, image: np.ndarray) -> Tensor:
        """64 x 32 patch tokens in row-major patch order."""
        return self.proj(Tensor(self.patch_features(image)))


def encode_latent(image: np.ndarray) -> np.ndarray:
    """16 x 16 x 4 latent: block-mean RGB scaled to [-1, 1] and a luminance channel."""
    check_image(image)
    rgb = block_mean(image, LATENT_BLOCK)
    luminance = rgb @ LUMINANCE
    return np.concatenate([rgb, luminance[..., None]], axis=-1) * 2.0 - 1.0


def decode_latent(latent: np.ndarray) -> np.ndarray:
    if latent.shape != (LATENT_SIZE, LATENT_SIZE, LATENT_CHANNELS):
        raise DimensionError(f"Expected a 16x16x4 latent, got shape {latent.shape}")
    rgb = (latent[..., :3] + 1.0) / 2.0
    image = np.repeat(np.repeat(rgb, LATENT_BLOCK, axis=0), LATENT_BLOCK, axis=1)
    return np.clip(image, 0.0, 1.0)


def _expected_area(label: str) -> float:
    kind, sizes = LABEL_SHAPES[label]
    factor = math.pi / 4 if kind is ShapeKind.ELLIPSE else 1.0
    return float(np.mean([w * h for w, h in sizes])) * factor


class ProxyClip:
    """
    Shared image/caption embedding space for similarity scores.

    Both branches produce a grounded feature vector: a constant anchor plus the
    fraction of each image quadrant covered by each palette colour. Captions
    predict that coverage from their `colour label at vertical horizontal`
    phrases. A fixed seeded projection with orthonormal rows maps features to
    32 dimensions, preserving cosines, before L2 normalisation.
    """

    def __init__(self, seed: int = PROXY_CLIP_SEED):
        rng = np.random.default_rng(seed)
        n_features = 1 + len(VERTICAL) * len(HORIZONTAL) * len(COLORS)
        q, _ = np.linalg.qr(rng.normal(size=(EMBED_DIM, n_features)))
        self.projection = q.T  # n_features x 32, orthonormal rows
        self.palette = np.array([PALETTE[c] for c in COLORS], dtype=np.float64) / 255.0
        self.quadrant_area = (IMAGE_SIZE // 2) ** 2

    def _embed(self, features: np.ndarray) -> np.ndarray:
        out = features @ self.projection
        return out / np.linalg.norm(out)

    def image_features(self, image: np.ndarray) -> np.ndarray:
        check_image(image)
        distances = np.linalg.norm(image[:, :, None, :] - self.palette[None, None], axis=-1)
        nearest = distances.argmin(axis=-1)
        coloured = distances.min(axis=-1) < PALETTE_DISTANCE
        half = IMAGE_SIZE // 2
        coverage = np.zeros((len(VERTICAL), len(HORIZONTAL), len(COLORS)))
        for v in range(len(VERTICAL)):
            for h in range(len(HORIZONTAL)):
                cells = (slice(v * half, (v + 1) * half), slice(h * half, (h + 1) * half))
                counts = np.bincount(nearest[cells][coloured[cells]], minlength=len(COLORS))
                coverage[v, h] = counts / self.quadrant_area
        return np.concatenate([[PROXY_ANCHOR], coverage.reshape(-1)])

    def text_features(self, words: list[str]) -> np.ndarray:
        coverage = np.zeros((len(VERTICAL), len(HORIZONTAL), len(COLORS)))
        phrase: list[str] = []
        for word in [*words, CONNECTIVE]:
            if word != CONNECTIVE:
                phrase.append(word)
                continue
            # colour label at vertical horizontal
            if (
                len(phrase) == 5
                and phrase[0] in COLORS
                and phrase[1] in LABEL_SHAPES
                and phrase[3] in VERTICAL
                and phrase[4] in HORIZONTAL
            ):
                v, h = VERTICAL.index(phrase[3]), HORIZONTAL.index(phrase[4])
                coverage[v, h, COLORS.index(phrase[0])] += _expected_area(phrase[1]) / self.quadrant_area
            phrase = []
        return np.concatenate([[PROXY_ANCHOR], coverage.reshape(-1)])

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._embed(self.image_features(image))

    def embed_text(self, words: list[str]) -> np.ndarray:
        return self._embed(self.text_features(words))

    def clip_t(self, image: np.ndarray, words: list[str]) -> float:
        """Cosine between a caption and an image in the proxy space."""
        return float(self.embed_text(words) @ self.embed_image(image))
