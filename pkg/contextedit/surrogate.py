"""Single-layer transformer predicting the proxy CLIP-T score of an edit, and the refinement loss."""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from contextedit.config import EMBED_DIM, MAX_PROMPT_LENGTH
from contextedit.errors import ContractError, DimensionError
from contextedit.nn import Linear, Module, TransformerBlock
from contextedit.numerics import Tensor, concat, matmul, softmax, stack, straight_through

SURROGATE_HEADS = 4
INPUT_KINDS = 3  # image, instruction, mask summary


def hard_coverage(concatenated: np.ndarray) -> np.ndarray:
    """Fraction of editable cells in every column of a 16 x 16 x m mask."""
    return concatenated.reshape(-1, concatenated.shape[-1]).mean(axis=0)


def pad_coverage(coverage: Tensor) -> Tensor:
    m = coverage.shape[0]
    if m > MAX_PROMPT_LENGTH:
        raise DimensionError(f"Prompt of {m} positions exceeds the supported {MAX_PROMPT_LENGTH}")
    if m == MAX_PROMPT_LENGTH:
        return coverage
    return concat([coverage, Tensor(np.zeros(MAX_PROMPT_LENGTH - m))])


@dataclass
class SurrogateInput:
    image: Tensor  # 32, pooled image tokens
    instruction: Tensor  # 32, pooled text embeddings
    coverage: Tensor  # 48, per-text-position mask coverage, zero padded

    @classmethod
    def build(cls, image_tokens: Tensor, text: Tensor, coverage: Tensor | np.ndarray) -> "SurrogateInput":
        coverage = coverage if isinstance(coverage, Tensor) else Tensor(coverage)
        if np.any(coverage.data < 0.0) or np.any(coverage.data > 1.0):
            raise ContractError("Coverage fractions must lie in [0, 1]")
        return cls(
            image=image_tokens.mean(axis=0),
            instruction=text.mean(axis=0),
            coverage=pad_coverage(coverage),
        )

    def detach(self) -> "SurrogateInput":
        return SurrogateInput(self.image.detach(), self.instruction.detach(), self.coverage.detach())


def soft_coverage(
    concatenated: np.ndarray,
    similarity: Tensor,
    probabilities: Sequence[Tensor | None],
) -> Tensor:
    """
    Per-column coverage with a straight-through gradient.

    The forward value is the coverage of the binary concatenated mask; the
    gradient is that of the mean mask probability of each output token, mixed
    over tokens by the column softmax of the similarity matrix. Tokens without
    probabilities ([NEG]) contribute zero.
    """
    n = similarity.shape[0]
    if len(probabilities) != n:
        raise DimensionError(f"{len(probabilities)} probability maps for {n} output tokens")
    token_means = stack([Tensor(0.0) if p is None else p.mean() for p in probabilities])
    mixing = softmax(similarity, axis=0)
    soft = matmul(token_means.reshape(1, n), mixing).reshape(similarity.shape[1])
    return straight_through(hard_coverage(concatenated), soft)


class Surrogate(Module):
    """
    One transformer block over [image, instruction, mask summary] with learned
    type embeddings, mean-pooled into a tanh-squashed scalar.

    The mask summary is a fixed (never trained) projection of the coverage
    vector into the model width.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.summary = Tensor(rng.normal(0.0, 1.0 / math.sqrt(MAX_PROMPT_LENGTH), (MAX_PROMPT_LENGTH, EMBED_DIM)))
        self.types = Tensor(rng.normal(0.0, 0.02, (INPUT_KINDS, EMBED_DIM)), requires_grad=True)
        self.block = TransformerBlock(rng, EMBED_DIM, SURROGATE_HEADS)
        self.head = Linear(rng, EMBED_DIM, 1)

    def predict(self, inputs: SurrogateInput) -> Tensor:
        """Scalar score in [-1, 1]."""
        summary = matmul(inputs.coverage.reshape(1, MAX_PROMPT_LENGTH), self.summary).reshape(EMBED_DIM)
        x = stack([inputs.image, inputs.instruction, summary]) + self.types
        pooled = self.block(x).mean(axis=0, keepdims=True)
        return self.head(pooled).tanh().reshape(())

    __call__ = predict


def surrogate_mse_loss(predicted: Sequence[Tensor], actual: Sequence[float]) -> Tensor:
    """Mean of (actual - predicted)^2 over a batch."""
    if not predicted:
        raise ContractError("Surrogate loss needs a non-empty batch")
    if len(predicted) != len(actual):
        raise DimensionError(f"{len(predicted)} predictions for {len(actual)} scores")
    errors = stack([p.reshape(()) for p in predicted]) - np.asarray(actual, dtype=np.float64)
    return (errors * errors).mean()


def refine_step(
    main: Tensor,
    predicted: Sequence[Tensor],
    oracle: float,
    weight: float,
    surrogate: Surrogate,
) -> Tensor:
    """Main loss plus `weight` times the MSE between predicted scores and the oracle score."""
    if any(p.requires_grad for p in surrogate.parameters()):
        raise ContractError("Refinement needs a frozen surrogate")
    return main + surrogate_mse_loss(predicted, [oracle] * len(predicted)) * weight
