"""The joint image/instruction transformer emitting one [MASK] or [NEG] token per instruction."""
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from contextedit.config import EMBED_DIM, HEAD_BLOCKS, HEAD_HEADS, PATCH_GRID, TokenLabel
from contextedit.errors import ContractError, DimensionError
from contextedit.nn import (
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    apply_lora,
    grid_positions,
    sinusoidal_positions,
)
from contextedit.numerics import Tensor, concat, cross_entropy
from contextedit.vocab import BOUNDARY, CONNECTIVE, VOCAB_SIZE, WORD_IDS, boundary_positions

BLOCKED = -1e9  # Additive attention logit for disallowed pairs
LABEL_COLUMNS = {TokenLabel.MASK: 0, TokenLabel.NEG: 1}


@dataclass
class OutputTokenSet:
    embeddings: Tensor  # n x 32
    class_logits: Tensor  # n x 2, columns [MASK], [NEG]

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


def attention_segments(ids: Sequence[int]) -> np.ndarray:
    """
    Attention group of every prompt position.

    Words of instruction i (its boundary marker included) form group i. The
    connective between instructions forms a group of its own, marked -1.
    """
    segments = np.empty(len(ids), dtype=np.int64)
    current = 0
    for j, token in enumerate(ids):
        if token == WORD_IDS[CONNECTIVE]:
            segments[j] = -1
            continue
        segments[j] = current
        if token == WORD_IDS[BOUNDARY]:
            current += 1
    return segments


def attention_bias(n_image: int, ids: Sequence[int]) -> np.ndarray:
    """Image tokens see everything; prompt tokens see the image and their own instruction."""
    segments = attention_segments(ids)
    m = len(ids)
    allowed = np.ones((n_image + m, n_image + m), dtype=bool)
    same = segments[:, None] == segments[None, :]
    isolated = segments == -1
    same[isolated, :] = False
    same[np.arange(m), np.arange(m)] = True
    allowed[n_image:, n_image:] = same
    return np.where(allowed, 0.0, BLOCKED)


class InstructionHead(Module):
    """
    Two pre-norm transformer blocks over [image tokens; prompt tokens].

    The hidden state at each boundary marker is read out as that instruction's
    output token and classified as [MASK] or [NEG]. The token table is frozen;
    the image projector, readout and classifier are trained, and the blocks are
    adapted through low-rank adapters only (see `adapt`).
    """

    def __init__(self, seed: int = 0, *, use_positions: bool = True):
        rng = np.random.default_rng(seed)
        self.token_table = Tensor(rng.normal(0.0, 1.0, (VOCAB_SIZE, EMBED_DIM)))
        self.projector = Linear(rng, EMBED_DIM, EMBED_DIM)
        self.blocks = [TransformerBlock(rng, EMBED_DIM, HEAD_HEADS) for _ in range(HEAD_BLOCKS)]
        self.norm = LayerNorm(EMBED_DIM)
        self.readout = Linear(rng, EMBED_DIM, EMBED_DIM)
        self.classifier = Linear(rng, EMBED_DIM, len(TokenLabel))
        self.use_positions = use_positions

    def adapt(self, rank: int, scale: float, targets: Iterable[str], rng: np.random.Generator) -> list[str]:
        """Freeze the transformer blocks and attach low-rank adapters to the targeted layers."""
        for block in self.blocks:
            block.freeze()
        adapted = []
        for i, block in enumerate(self.blocks):
            adapted += [f"blocks.{i}.{name}" for name in apply_lora(block, rank, scale, rng, targets)]
        return adapted

    def forward(self, image_tokens: Tensor, prompt_ids: Sequence[int]) -> OutputTokenSet:
        boundaries = boundary_positions(list(prompt_ids))
        if not boundaries:
            raise ContractError("Prompt contains no instruction boundary marker")
        if image_tokens.ndim != 2 or image_tokens.shape[1] != EMBED_DIM:
            raise DimensionError(f"Expected P x {EMBED_DIM} image tokens, got {image_tokens.shape}")
        n_image, m = image_tokens.shape[0], len(prompt_ids)

        image = self.projector(image_tokens)
        text = self.token_table[np.asarray(prompt_ids)]
        if self.use_positions:
            if n_image != PATCH_GRID * PATCH_GRID:
                raise DimensionError(f"Expected {PATCH_GRID * PATCH_GRID} image tokens, got {n_image}")
            image = image + grid_positions(PATCH_GRID, EMBED_DIM)
            text = text + sinusoidal_positions(m, EMBED_DIM)

        x = concat([image, text], axis=0)
        bias = attention_bias(n_image, prompt_ids)
        for block in self.blocks:
            x = block(x, bias=bias)
        hidden = self.norm(x[np.asarray(boundaries) + n_image])
        embeddings = self.readout(hidden)
        return OutputTokenSet(embeddings=embeddings, class_logits=self.classifier(embeddings))

    __call__ = forward


def classify(class_logits: Tensor | np.ndarray) -> list[TokenLabel]:
    """Row-wise argmax; ties go to [NEG] so uncertain instructions don't edit."""
    logits = class_logits.numpy() if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    return [TokenLabel.MASK if row[0] > row[1] else TokenLabel.NEG for row in logits]


def label_targets(applicable: Sequence[bool]) -> list[int]:
    return [LABEL_COLUMNS[TokenLabel.MASK if a else TokenLabel.NEG] for a in applicable]


def token_ce_loss(class_logits: Tensor, applicable: Sequence[bool]) -> Tensor:
    """Mean cross-entropy of the output-token classes against the applicability flags."""
    if class_logits.shape[0] != len(applicable):
        raise DimensionError(
            f"{class_logits.shape[0]} output tokens but {len(applicable)} applicability flags"
        )
    return cross_entropy(class_logits, label_targets(applicable))
