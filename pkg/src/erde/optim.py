"""Adaptive-moment optimizer with bias correction."""

from __future__ import annotations

import numpy as np


class MissingGradientError(RuntimeError):
    """A trainable parameter had no gradient at step time."""


class Adam:
    """Standard adaptive-moment update: first/second moment estimates with
    bias correction, epsilon outside the square root."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if isinstance(params, dict):
            self._params = list(params.items())
        else:
            self._params = [(f"param{i}", p) for i, p in enumerate(params)]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self._params]
        self._v = [np.zeros_like(p.data) for _, p in self._params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, (name, p) in enumerate(self._params):
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None
