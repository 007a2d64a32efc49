"""Trainable parameter buffers and the Adam update rule."""

from __future__ import annotations

import numpy as np


class Param:
    """A trainable array with gradient and Adam moment buffers.

    The arrays may be swapped out wholesale (the feature grid grows its
    tables); holders keep a reference to the ``Param`` object, never to the
    underlying arrays.
    """

    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0


class Adam:
    """Adam over named parameter groups with permanent-freeze support.

    ``step(frozen=...)`` discards the gradients of frozen groups without
    touching their values or moments, so a frozen group is bitwise stable.
    """

    def __init__(self, groups: dict[str, list[Param]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, frozen: frozenset[str] | set[str] = frozenset()):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, params in self.groups.items():
            for p in params:
                if name in frozen:
                    p.zero_grad()
                    continue
                g = p.grad
                p.m += (1.0 - self.beta1) * (g - p.m)
                p.v += (1.0 - self.beta2) * (g * g - p.v)
                denom = np.sqrt(p.v / c2) + self.eps
                p.value -= (self.lr / c1) * p.m / denom
                p.zero_grad()
