"""Two-layer cross-attention decoder turning [MASK] output tokens into binary editing masks."""
import math
from typing import Sequence

import numpy as np

from contextedit.config import (
    DICE_SMOOTHING,
    EMBED_DIM,
    GRID,
    IMAGE_SIZE,
    MASK_THRESHOLD,
    PATCH_GRID,
    TokenLabel,
)
from contextedit.errors import DimensionError
from contextedit.nn import Linear, Module, TransformerBlock, grid_positions
from contextedit.numerics import Tensor, matmul, sigmoid, stack, upsample_nearest

DECODER_HEADS = 4
PROBABILITY_FLOOR = 1e-12


def empty_mask() -> np.ndarray:
    return np.zeros((IMAGE_SIZE, IMAGE_SIZE))


def binarize(probabilities: np.ndarray) -> np.ndarray:
    return (probabilities >= MASK_THRESHOLD).astype(np.float64)


class TokenDecoder(Module):
    """
    Layer 1 lets patch features attend to the text embeddings; layer 2 lets
    them attend to the [MASK] token embeddings. A scaled dot product between
    each patch and each projected [MASK] token gives per-patch logits, upsampled
    to image resolution.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.query = Linear(rng, EMBED_DIM, EMBED_DIM)
        self.text_layer = TransformerBlock(rng, EMBED_DIM, DECODER_HEADS)
        self.token_layer = TransformerBlock(rng, EMBED_DIM, DECODER_HEADS)
        self.token_proj = Linear(rng, EMBED_DIM, EMBED_DIM)
        self.score_bias = Tensor(np.zeros(1), requires_grad=True)

    def patch_logits(self, image_tokens: Tensor, text: Tensor, mask_tokens: Tensor) -> Tensor:
        """k x 64 pre-sigmoid scores, one row per [MASK] token."""
        if image_tokens.shape != (PATCH_GRID * PATCH_GRID, EMBED_DIM):
            raise DimensionError(f"Expected 64 x {EMBED_DIM} image tokens, got {image_tokens.shape}")
        queries = self.query(image_tokens) + grid_positions(PATCH_GRID, EMBED_DIM)
        h = self.text_layer(queries, memory=text)
        h = self.token_layer(h, memory=mask_tokens)
        scores = matmul(h, self.token_proj(mask_tokens).T) * (1.0 / math.sqrt(EMBED_DIM))
        return (scores + self.score_bias).T

    def mask_probabilities(
        self, image_tokens: Tensor, text: Tensor, output_tokens: Tensor, indices: Sequence[int]
    ) -> Tensor:
        """k x 64 x 64 mask probabilities for the output tokens at `indices`."""
        mask_tokens = output_tokens[np.asarray(indices)]
        logits = self.patch_logits(image_tokens, text, mask_tokens)
        return logits_to_probabilities(logits)

    def decode(
        self,
        image_tokens: Tensor,
        text: Tensor,
        output_tokens: Tensor,
        labels: Sequence[TokenLabel],
    ) -> tuple[list[np.ndarray], list[Tensor | None]]:
        """
        Binary masks for every output token, plus the probabilities behind them.

        [NEG] tokens get all-zero masks and no probabilities; when no token is
        [MASK] the decoder isn't run at all.
        """
        if len(labels) != output_tokens.shape[0]:
            raise DimensionError(f"{len(labels)} labels for {output_tokens.shape[0]} output tokens")
        masks = [empty_mask() for _ in labels]
        probabilities: list[Tensor | None] = [None] * len(labels)
        indices = [i for i, label in enumerate(labels) if label is TokenLabel.MASK]
        if not indices:
            return masks, probabilities
        decoded = self.mask_probabilities(image_tokens, text, output_tokens, indices)
        for row, i in enumerate(indices):
            probabilities[i] = decoded[row]
            masks[i] = binarize(decoded.data[row])
        return masks, probabilities


def logits_to_probabilities(patch_logits: Tensor) -> Tensor:
    """Sigmoid of k x 64 patch logits, upsampled to k x 64 x 64 pixels."""
    probabilities = sigmoid(patch_logits)
    return stack(
        [
            upsample_nearest(probabilities[i].reshape(PATCH_GRID, PATCH_GRID), GRID)
            for i in range(patch_logits.shape[0])
        ]
    )


def _check_shapes(probabilities: Tensor, target: np.ndarray) -> None:
    if probabilities.shape != np.shape(target):
        raise DimensionError(f"Prediction shape {probabilities.shape} differs from mask shape {np.shape(target)}")


def dice_loss(probabilities: Tensor, target: np.ndarray, smoothing: float = DICE_SMOOTHING) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)."""
    _check_shapes(probabilities, target)
    target = np.asarray(target, dtype=np.float64)
    overlap = (probabilities * target).sum()
    return 1.0 - (overlap * 2.0 + smoothing) / (probabilities.sum() + (float(target.sum()) + smoothing))


def mask_bce_loss(probabilities: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy, with probabilities kept off 0 and 1."""
    _check_shapes(probabilities, target)
    target = np.asarray(target, dtype=np.float64)
    p = probabilities.clip(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    return -(p.log() * target + (1.0 - p).log() * (1.0 - target)).mean()
