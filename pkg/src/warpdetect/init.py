"""Seeded parameter initialization: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""

import numpy as np

from .tensor import Tensor


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)
