"""Seeded weight initializers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def fan_in(shape) -> int:
    return int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])


def init_gaussian(shape, mu: float = 0.0, sigma: float = 0.01, seed=0) -> Tensor:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return Tensor(mu + sigma * _rng(seed).standard_normal(tuple(shape)), requires_grad=True)


def init_he(shape, seed=0) -> Tensor:
    """Zero-mean Gaussian with variance ``2 / fan_in`` (fan_in = product of trailing dims)."""
    return init_gaussian(shape, 0.0, float(np.sqrt(2.0 / fan_in(shape))), seed)


def init_constant(shape, value: float) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)), requires_grad=True)
