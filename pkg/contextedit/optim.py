import numpy as np

from contextedit.errors import ConfigError
from contextedit.numerics import Tensor


class AdamW:
    """Adam with decoupled weight decay, updating tensors in place from their `.grad`."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        if lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1**self.steps
        correction2 = 1.0 - beta2**self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad * p.grad
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
