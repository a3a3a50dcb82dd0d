"""Plain SGD and Adam parameter updates.

Both update in place and are deterministic given their state; the choice
between them is a config field because the training recipe leaves the
optimizer open.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingStateError
from .tensor import Tensor


class _Optimizer:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grad(self, p: Tensor) -> np.ndarray:
        if p.grad is None:
            raise TrainingStateError("trainable parameter has no gradient; run backward() first")
        return p.grad

    def step(self) -> None:
        raise NotImplementedError


class SGD(_Optimizer):
    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * self._grad(p)


class Adam(_Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = self._grad(p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, params: list[Tensor], lr: float) -> _Optimizer:
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise TrainingStateError(f"unknown optimizer {name!r}")
