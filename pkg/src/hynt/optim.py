"""Adam with bias correction and a cosine-annealing schedule with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class CosineRestarts:
    """Cosine annealing from ``base_lr`` to ``min_lr`` over cycles of ``t0``, ``t0*t_mult``, ... units.

    ``t`` is measured in epochs and may be fractional.
    """

    base_lr: float = 5e-4
    min_lr: float = 0.0
    t0: float = 50.0
    t_mult: float = 1.0

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("cycle length must be positive")
        if self.t_mult < 1:
            raise ValueError("cycle multiplier must be >= 1")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ValueError("need 0 <= min_lr <= base_lr")

    def cycle_position(self, t: float) -> tuple[float, float]:
        """Return ``(t_cur, cycle_length)`` for time ``t``."""
        if t < 0:
            raise ValueError("schedule time must be non-negative")
        if self.t_mult == 1:
            return t % self.t0, self.t0
        # start of cycle n is t0 * (m^n - 1) / (m - 1)
        m = self.t_mult
        n = int(math.floor(math.log(t * (m - 1) / self.t0 + 1, m)))
        start = self.t0 * (m**n - 1) / (m - 1)
        if t < start:  # guard against rounding in the log
            n -= 1
            start = self.t0 * (m**n - 1) / (m - 1)
        length = self.t0 * m**n
        if t - start >= length:
            start += length
            length *= m
        return t - start, length

    def lr_at(self, t: float) -> float:
        t_cur, length = self.cycle_position(t)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * t_cur / length))


def lr_at(t: float, schedule: CosineRestarts) -> float:
    return schedule.lr_at(t)


@dataclass
class Adam:
    """Adam over a name -> Tensor parameter mapping.

    Moments are kept per parameter name and shape-match their parameters.
    """

    params: dict[str, Tensor]
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
