"""Adaptive-moment gradient descent (Adam) over engine tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ParameterError, Tensor


class Adam:
    """Standard Adam with bias correction; state is per-parameter.

    Parameters whose ``.grad`` is None at ``step()`` are skipped; an
    explicit zero gradient yields an exactly zero update.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError("beta coefficients must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
