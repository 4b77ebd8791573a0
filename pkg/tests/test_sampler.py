"""Bilinear sampling: identity exactness, lattice hits, hand-computed
interpolation, partition of unity, and grid-coordinate gradients."""

import numpy as np
import pytest

from warpdetect import ops, tps
from warpdetect.errors import ConfigurationError
from warpdetect.gradcheck import gradcheck
from warpdetect.sampler import PaddingPolicy, bilinear_sample, identity_grid
from warpdetect.tensor import Tensor

from conftest import param


class TestIdentityGrid:
    def test_corners_2x2(self):
        g = identity_grid(2, 2)
        assert np.array_equal(g.coords[0, 0], [-1, -1])
        assert np.array_equal(g.coords[1, 1], [1, 1])
        assert np.array_equal(g.coords[0, 1], [1, -1])

    def test_center_3x3(self):
        g = identity_grid(3, 3)
        assert np.array_equal(g.coords[1, 1], [0, 0])

    def test_xcoords_5x4(self):
        g = identity_grid(5, 4)
        expect = np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
        for row in range(5):
            assert np.allclose(g.coords[row, :, 0], expect, atol=1e-15)

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            identity_grid(1, 4)


class TestBilinearSample:
    def test_identity_bit_exact(self, rng):
        x = rng.standard_normal((3, 7, 9))
        out = bilinear_sample(Tensor(x), identity_grid(7, 9))
        assert np.array_equal(out.data, x)

    def test_lattice_hit(self, rng):
        x = rng.standard_normal((2, 5, 5))
        # a grid pointing every output pixel at input pixel (2,3)
        gx = -1 + 2 * 3 / 4.0
        gy = -1 + 2 * 2 / 4.0
        coords = np.tile([gx, gy], (4, 4, 1))
        g = tps.SamplingGrid(height=4, width=4, coords=coords)
        out = bilinear_sample(Tensor(x), g)
        for c in range(2):
            assert np.all(out.data[c] == x[c, 2, 3])

    def test_center_average(self):
        x = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        g = tps.SamplingGrid(height=2, width=2,
                             coords=np.zeros((2, 2, 2)))
        out = bilinear_sample(x, g)
        assert np.allclose(out.data, 1.5)

    def test_zeros_padding_outside(self, rng):
        x = rng.standard_normal((1, 4, 4)) + 5.0
        coords = np.full((2, 2, 2), 3.0)   # way outside [-1,1]
        g = tps.SamplingGrid(height=2, width=2, coords=coords)
        out = bilinear_sample(Tensor(x), g, PaddingPolicy("zeros"))
        assert np.all(out.data == 0.0)

    def test_clamp_padding_outside(self, rng):
        x = rng.standard_normal((1, 4, 4))
        coords = np.full((2, 2, 2), 3.0)
        g = tps.SamplingGrid(height=2, width=2, coords=coords)
        out = bilinear_sample(Tensor(x), g, PaddingPolicy("clamp"))
        assert np.allclose(out.data, x[0, 3, 3])

    def test_partition_of_unity(self, rng):
        # constant image stays constant wherever all 4 corners are in range
        x = Tensor(np.full((1, 6, 6), 3.25))
        coords = rng.uniform(-0.95, 0.95, (5, 5, 2))
        g = tps.SamplingGrid(height=5, width=5, coords=coords)
        out = bilinear_sample(x, g)
        assert np.max(np.abs(out.data - 3.25)) < 1e-15

    def test_batched_matches_single(self, rng):
        x = rng.standard_normal((3, 2, 6, 6))
        coords = rng.uniform(-0.9, 0.9, (3, 4, 4, 2))
        out = ops.grid_sample(Tensor(x), Tensor(coords))
        for n in range(3):
            single = ops.grid_sample(Tensor(x[n]), Tensor(coords[n]))
            assert np.max(np.abs(out.data[n] - single.data)) < 1e-15


def _safe_coords(rng, h, w, n, margin=1e-3):
    """Coordinates at least `margin` (in cell units) away from cell edges."""
    cells_x = rng.integers(0, w - 1, size=n)
    cells_y = rng.integers(0, h - 1, size=n)
    fx = rng.uniform(margin, 1 - margin, size=n)
    fy = rng.uniform(margin, 1 - margin, size=n)
    px = cells_x + fx
    py = cells_y + fy
    return np.stack([2 * px / (w - 1) - 1, 2 * py / (h - 1) - 1], axis=1)


class TestSamplerGradients:
    def test_image_gradcheck(self, rng):
        x = param(rng.standard_normal((2, 5, 5)))
        coords = _safe_coords(rng, 5, 5, 12).reshape(3, 4, 2)
        rep = gradcheck(lambda u: ops.grid_sample(u, Tensor(coords)), [x],
                        op_name="bilinear-image")
        assert rep.passed, rep

    def test_grid_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 6)))
        coords = param(_safe_coords(rng, 6, 6, 12).reshape(3, 4, 2))
        rep = gradcheck(lambda g: ops.grid_sample(x, g), [coords],
                        op_name="bilinear-grid")
        assert rep.passed, rep

    def test_grid_gradcheck_clamp(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 6)))
        coords = param(_safe_coords(rng, 6, 6, 12).reshape(3, 4, 2))
        rep = gradcheck(lambda g: ops.grid_sample(x, g, padding="clamp"),
                        [coords], op_name="bilinear-grid-clamp")
        assert rep.passed, rep
