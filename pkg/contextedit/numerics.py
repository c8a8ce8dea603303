"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a `Tensor` that requires gradients records its parents and a
closure computing their gradient contributions. `backward` orders the recorded
graph topologically (the tape), runs the closures from the loss down to the
leaves, accumulating into `.grad`, and then discards the tape.
"""
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from contextedit.errors import ContractError, DimensionError, NumericalError

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording, e.g. while sampling or evaluating."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: "Tensor", grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _lift(value: "Tensor | np.ndarray | float") -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """A dense row-major float64 array that can take part in the gradient tape."""

    __array_ufunc__ = None  # Make `ndarray <op> Tensor` defer to the Tensor operators

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
        op: str,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"Operation '{op}' produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f"`.T` needs a 2-D tensor, got shape {self.shape}")
        return self.transpose(1, 0)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # Elementwise arithmetic

    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self, other
        _check_broadcast(a, b, "add")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self, other
        _check_broadcast(a, b, "sub")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.shape))

        return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self, other
        _check_broadcast(a, b, "mul")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self, other
        _check_broadcast(a, b, "div")
        if np.any(b.data == 0):
            raise NumericalError("Division by zero")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __pow__(self, exponent: float) -> "Tensor":
        x = self

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * exponent * x.data ** (exponent - 1))

        return Tensor._from_op(x.data**exponent, (x,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        x = self

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            _accumulate(x, full)

        return Tensor._from_op(np.array(x.data[index]), (x,), backward, "getitem")

    # Unary functions

    def exp(self) -> "Tensor":
        x = self
        out = np.exp(x.data)

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * out)

        return Tensor._from_op(out, (x,), backward, "exp")

    def log(self) -> "Tensor":
        x = self
        if np.any(x.data <= 0):
            raise NumericalError("Logarithm of a non-positive value")

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g / x.data)

        return Tensor._from_op(np.log(x.data), (x,), backward, "log")

    def sqrt(self) -> "Tensor":
        x = self
        if np.any(x.data < 0):
            raise NumericalError("Square root of a negative value")
        out = np.sqrt(x.data)

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * 0.5 / out)

        return Tensor._from_op(out, (x,), backward, "sqrt")

    def tanh(self) -> "Tensor":
        x = self
        out = np.tanh(x.data)

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * (1.0 - out * out))

        return Tensor._from_op(out, (x,), backward, "tanh")

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def clip(self, low: float, high: float) -> "Tensor":
        x = self
        inside = (x.data >= low) & (x.data <= high)

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g * inside)

        return Tensor._from_op(np.clip(x.data, low, high), (x,), backward, "clip")

    # Shape manipulation

    def reshape(self, *shape: int) -> "Tensor":
        x = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            out = x.data.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"Can't reshape {x.shape} to {shape}") from e

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g.reshape(x.shape))

        return Tensor._from_op(out, (x,), backward, "reshape")

    def transpose(self, *axes: int) -> "Tensor":
        x = self
        axes = axes or tuple(reversed(range(x.ndim)))
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"Invalid axes {axes} for shape {x.shape}")
        inverse = tuple(np.argsort(axes))

        def backward(g: np.ndarray) -> None:
            _accumulate(x, g.transpose(inverse))

        return Tensor._from_op(x.data.transpose(axes), (x,), backward, "transpose")

    # Reductions

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        x = self

        def backward(g: np.ndarray) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.shape))

        return Tensor._from_op(
            np.array(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum"
        )

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise DimensionError("Mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"Shapes {a.shape} and {b.shape} don't broadcast in '{op}'") from e


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the trailing two axes; leading axes of `a` must match or be absent in `b`."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * out * (1.0 - out))

    return Tensor._from_op(out, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    x = _lift(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s * (1.0 + x.data * (1.0 - s)))

    return Tensor._from_op(x.data * s, (x,), backward, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"Axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"Axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets: Sequence[int] | int) -> Tensor:
    """Mean cross-entropy of row-wise class logits against integer targets."""
    logits = _lift(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rows, classes = logits.shape
    if targets.shape != (rows,):
        raise DimensionError(f"Got {targets.size} targets for {rows} rows of logits")
    if np.any(targets < 0) or np.any(targets >= classes):
        raise ContractError(f"Target index out of range for {classes} classes: {targets.tolist()}")
    picked = log_softmax(logits, axis=1)[np.arange(rows), targets]
    return -picked.mean()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (variance + eps).sqrt() * gamma + beta


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("Nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Can't concatenate shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> None:
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accumulate(t, part)

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([_lift(t).reshape(_expanded_shape(_lift(t).shape, axis)) for t in tensors], axis)


def _expanded_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:axis] + (1,) + shape[axis:]


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every cell of a 2-D grid into a `factor` x `factor` block."""
    x = _lift(x)
    if x.ndim != 2:
        raise DimensionError(f"upsample_nearest needs a 2-D grid, got {x.shape}")
    h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(h, factor, w, factor).sum(axis=(1, 3)))

    return Tensor._from_op(out, (x,), backward, "upsample")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the `hard` values, backward as if the op were the identity on `soft`."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"Straight-through shapes differ: {hard.shape} vs {soft.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(soft, g)

    return Tensor._from_op(hard.copy(), (soft,), backward, "straight_through")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every leaf that requires gradients with dLoss/dLeaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = 1e-5,
    samples_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Compare analytic gradients of the scalar `fn()` against central differences.

    Returns the maximum relative error over all checked coordinates. With
    `samples_per_tensor`, only that many random coordinates of each input are
    perturbed.
    """
    for tensor in inputs:
        tensor.grad = None
    loss = fn()
    backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            # `flat` writes through to the array whatever its memory layout
            flat = tensor.data.flat
            size = tensor.data.size
            indices = np.arange(size)
            if samples_per_tensor is not None and size > samples_per_tensor:
                indices = rng.choice(size, size=samples_per_tensor, replace=False)
            numeric = np.empty(len(indices))
            for k, index in enumerate(indices):
                original = flat[index]
                flat[index] = original + step
                upper = fn().item()
                flat[index] = original - step
                lower = fn().item()
                flat[index] = original
                numeric[k] = (upper - lower) / (2 * step)
            worst = max(worst, relative_error(grad.ravel()[indices], numeric))
    for tensor in inputs:
        tensor.grad = None
    return worst
