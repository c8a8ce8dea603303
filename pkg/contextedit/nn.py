"""Parameter containers and the layers every trainable component is built from."""
import math
from typing import Iterable, Iterator

import numpy as np

from contextedit.errors import ContractError, DimensionError
from contextedit.numerics import Tensor, layer_norm, matmul, silu, softmax


class Module:
    """
    Base class for anything holding parameters.

    Parameters are `Tensor` attributes; submodules are `Module` attributes or
    lists of modules. Names are dotted attribute paths in insertion order, so
    iteration order is stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_modules(f"{path}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)


class LowRankAdapter(Module):
    """Low-rank update `scale * A @ B` added to a frozen `p x q` weight."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, rank: int, scale: float):
        self.A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, rank)), requires_grad=True)
        self.B = Tensor(np.zeros((rank, fan_out)), requires_grad=True)
        self.scale = scale


class Linear(Module):
    """Row-vector affine map `x @ W + b`, optionally carrying a low-rank adapter."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = init_weight(rng, fan_in, fan_out)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None
        self.adapter: LowRankAdapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.adapter is not None:
            out = out + matmul(matmul(x, self.adapter.A), self.adapter.B) * self.adapter.scale
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def apply_lora(
    module: Module,
    rank: int,
    scale: float,
    rng: np.random.Generator,
    targets: Iterable[str] | None = None,
) -> list[str]:
    """
    Attach low-rank adapters to the `Linear` layers of `module` whose attribute
    name is in `targets` (all of them when `targets` is None).

    The adapted weight and bias are frozen; B starts at zero, so the adapted
    module computes exactly what it did before. Returns the adapted layer names.
    """
    targets = None if targets is None else set(targets)
    adapted: list[str] = []
    for name, layer in list(module.named_modules()):
        if not isinstance(layer, Linear):
            continue
        if targets is not None and name.rsplit(".", 1)[-1] not in targets:
            continue
        fan_in, fan_out = layer.weight.shape
        if not 1 <= rank < min(fan_in, fan_out):
            raise ContractError(
                f"LoRA rank must satisfy 1 <= rank < {min(fan_in, fan_out)} for '{name}', got {rank}"
            )
        layer.weight.requires_grad = False
        if layer.bias is not None:
            layer.bias.requires_grad = False
        layer.adapter = LowRankAdapter(rng, fan_in, fan_out, rank, scale)
        adapted.append(name)
    return adapted


def attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, bias: np.ndarray | None = None
) -> Tensor:
    """
    Multi-head scaled dot-product attention over row sequences.

    `q` is (Lq, d), `k` and `v` are (Lk, d). `bias` is an additive (Lq, Lk)
    logit offset, used for attention masks.
    """
    (lq, dim), lk = q.shape, k.shape[0]
    if dim % heads:
        raise DimensionError(f"Width {dim} isn't divisible by {heads} heads")
    width = dim // heads
    qh = q.reshape(lq, heads, width).transpose(1, 0, 2)
    kh = k.reshape(lk, heads, width).transpose(1, 2, 0)
    vh = v.reshape(lk, heads, width).transpose(1, 0, 2)
    logits = matmul(qh, kh) * (1.0 / math.sqrt(width))
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits, axis=-1)
    return matmul(weights, vh).transpose(1, 0, 2).reshape(lq, dim)


class TransformerBlock(Module):
    """
    Pre-norm transformer block with residual attention and a SiLU MLP.

    Without `memory` the block self-attends; with it, queries come from `x`
    and keys/values from `memory`.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, 2 * dim)
        self.fc2 = Linear(rng, 2 * dim, dim)

    def __call__(self, x: Tensor, memory: Tensor | None = None, bias: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        source = h if memory is None else memory
        x = x + self.o(attention(self.q(h), self.k(source), self.v(source), self.heads, bias))
        return x + self.fc2(silu(self.fc1(self.norm2(x))))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position signal, one row per position."""
    positions = np.arange(length)[:, None]
    frequencies = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * frequencies)
    table[:, 1::2] = np.cos(positions * frequencies)
    return table


def grid_positions(size: int, dim: int) -> np.ndarray:
    """2-D position signal for a `size` x `size` grid in row-major order: half the width per axis."""
    half = sinusoidal_positions(size, dim // 2)
    rows = np.repeat(half, size, axis=0)
    cols = np.tile(half, (size, 1))
    return np.concatenate([rows, cols], axis=1)


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    return sinusoidal_positions(t + 1, dim)[t]
