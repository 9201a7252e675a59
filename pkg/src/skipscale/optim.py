"""Parameter updates for training runs: AdamW (default) and plain SGD.

State is keyed by parameter name so updates are deterministic and independent
of object identity or process layout.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam with decoupled weight decay; defaults match the training recipe
    used throughout the experiments (lr 2e-4, betas (0.99, 0.999), wd 0.03)."""

    def __init__(self, lr: float = 2e-4, betas: tuple[float, float] = (0.99, 0.999),
                 weight_decay: float = 0.03, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


class SGD:
    """Plain (optionally momentum) stochastic gradient descent."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._buf: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        for name, p in params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.momentum != 0.0:
                buf = self._buf.get(name)
                if buf is None:
                    buf = np.zeros_like(p.data)
                    self._buf[name] = buf
                buf *= self.momentum
                buf += g
                g = buf
            p.data -= self.lr * g


def make_optimizer(kind: str, lr: float, betas=(0.99, 0.999), weight_decay: float = 0.03):
    kind = kind.lower()
    if kind == "adamw":
        return AdamW(lr=lr, betas=betas, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
