"""Adam with bias correction and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ScheduleExhausted


@dataclass(frozen=True)
class ConstantLR:
    def factor(self, step: int) -> float:
        return 1.0


@dataclass(frozen=True)
class PolyLR:
    """``(1 - step / max_iter) ** power``; stepping at or past ``max_iter`` is an error."""

    max_iter: int = 4000
    power: float = 0.9

    def factor(self, step: int) -> float:
        if step >= self.max_iter:
            raise ScheduleExhausted(f"step {step} >= max_iter {self.max_iter}")
        return (1.0 - step / self.max_iter) ** self.power


@dataclass(frozen=True)
class StepLR:
    """Multiply the rate by ``gamma`` once ``step`` reaches ``milestone``."""

    milestone: int = 1000
    gamma: float = 0.1

    def factor(self, step: int) -> float:
        return self.gamma if step >= self.milestone else 1.0


@dataclass
class AdamState:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    schedule: object = field(default_factory=ConstantLR)
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def lr(self, step: int | None = None) -> float:
        return self.base_lr * self.schedule.factor(self.step if step is None else step)


def adam_step(params, state: AdamState, grads=None) -> float:
    """Update ``params`` in place from their ``.grad`` (or explicit ``grads``).

    Returns the learning rate that was applied.
    """
    lr = state.lr()
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad if grads is None else grads[i]
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr
