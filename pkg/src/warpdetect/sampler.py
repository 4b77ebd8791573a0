"""Differentiable bilinear sampling of feature maps at grid coordinates.

Align-corners convention throughout: pixel 0 maps to -1 and pixel n-1 to
+1. Out-of-range reads follow the padding policy (zeros by default,
mirroring the black borders of warped images).
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor, as_tensor
from .tps import SamplingGrid, normalized_lattice


@dataclass(frozen=True)
class PaddingPolicy:
    mode: str = "zeros"

    def __post_init__(self):
        if self.mode not in ("zeros", "clamp"):
            raise ConfigurationError(f"padding mode must be zeros or clamp, "
                                     f"got {self.mode!r}")


def identity_grid(height, width):
    """The align-corners lattice over [-1,1]^2 (sampling at it is identity)."""
    if height < 2 or width < 2:
        raise ConfigurationError("grid dimensions must be >= 2")
    coords = normalized_lattice(height, width).reshape(height, width, 2)
    return SamplingGrid(height=height, width=width, coords=coords)


def bilinear_sample(x, grid, padding=PaddingPolicy()):
    """Sample (N,)C,H,W at grid coordinates; returns (N,)C,H',W'.

    ``grid`` may be a SamplingGrid or a Tensor of normalized coordinates
    (..., H', W', 2); gradients flow into the image and, for Tensor grids,
    into the coordinates.
    """
    if isinstance(padding, str):
        padding = PaddingPolicy(padding)
    if isinstance(grid, SamplingGrid):
        grid = Tensor(grid.coords)
    return ops.grid_sample(as_tensor(x), grid, padding=padding.mode)
