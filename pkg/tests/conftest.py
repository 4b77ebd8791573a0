import numpy as np
import pytest

from warpdetect.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
