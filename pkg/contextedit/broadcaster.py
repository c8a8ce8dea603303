"""Assigns every text position to the output token of the instruction it most resembles."""
from typing import Sequence

import numpy as np

from contextedit.config import EMBED_DIM, NORM_EPSILON
from contextedit.errors import ContractError, DimensionError, NumericalError
from contextedit.nn import Module, init_weight
from contextedit.numerics import Tensor, cross_entropy, matmul
from contextedit.vocab import instruction_segments


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    squared = (x * x).sum(axis=1, keepdims=True)
    if np.any(squared.data == 0.0):
        raise NumericalError(f"A projected {what} vector has zero norm")
    return x / (squared + NORM_EPSILON).sqrt()


class TokenBroadcaster(Module):
    """Trainable projections W_O (output tokens) and W_T (text embeddings) into a shared space."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        rng = np.random.default_rng(seed)
        self.W_O = init_weight(rng, EMBED_DIM, dim)
        self.W_T = init_weight(rng, EMBED_DIM, dim)

    def similarity(self, output_tokens: Tensor, text: Tensor) -> Tensor:
        """n x m cosine similarities between projected output tokens and projected text positions."""
        if output_tokens.shape[0] < 1 or text.shape[0] < 1:
            raise ContractError(
                "Similarity needs at least one output token and one text position, "
                f"got {output_tokens.shape[0]} and {text.shape[0]}"
            )
        projected_o = _normalize_rows(matmul(output_tokens, self.W_O), "output token")
        projected_t = _normalize_rows(matmul(text, self.W_T), "text")
        return matmul(projected_o, projected_t.T)


def align(similarity: Tensor | np.ndarray) -> np.ndarray:
    """
    Output-token index of every text position.

    The column softmax is monotone, so its argmax is the argmax of the raw
    column; ties go to the smallest index.
    """
    scores = similarity.numpy() if isinstance(similarity, Tensor) else np.asarray(similarity)
    if not np.all(np.isfinite(scores)):
        raise NumericalError("Similarity matrix contains non-finite values")
    return np.argmax(scores, axis=0)


def alignment_targets(prompt_ids: Sequence[int]) -> np.ndarray:
    """Ground truth: every position maps to the instruction containing it."""
    return np.asarray(instruction_segments(list(prompt_ids)), dtype=np.int64)


def broadcast_ce_loss(similarity: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over text positions of the cross-entropy of the column softmax against the true token."""
    if similarity.shape[1] != len(targets):
        raise DimensionError(f"{similarity.shape[1]} text positions but {len(targets)} alignment targets")
    return cross_entropy(similarity.T, targets)
