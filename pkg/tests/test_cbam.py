"""CBAM against a plain scalar re-implementation of the gating equations."""

import numpy as np
import pytest

from warpdetect import cbam, ops
from warpdetect.errors import ConfigurationError, DimensionError
from warpdetect.gradcheck import gradcheck
from warpdetect.tensor import Tensor

from conftest import param


def sigmoid_scalar(z):
    return 1.0 / (1.0 + np.exp(-z))


def channel_attention_scalar(w0, w1, x):
    """Scalar loops: sigmoid(W1 relu(W0 gap) + W1 relu(W0 gmp))."""
    C, H, W = x.shape
    gap = np.array([x[c].sum() / (H * W) for c in range(C)])
    gmp = np.array([x[c].max() for c in range(C)])
    def mlp(v):
        h = np.maximum(w0 @ v, 0.0)
        return w1 @ h
    return sigmoid_scalar(mlp(gap) + mlp(gmp))


def spatial_attention_scalar(kern, bias, x):
    """Scalar loops: sigmoid(conv7x7([channel-max; channel-mean]))."""
    C, H, W = x.shape
    mx = x.max(axis=0)
    av = x.mean(axis=0)
    planes = np.stack([mx, av])
    out = np.zeros((1, H, W))
    pad = 3
    for i in range(H):
        for j in range(W):
            acc = bias[0]
            for p in range(2):
                for ki in range(7):
                    for kj in range(7):
                        ii, jj = i - pad + ki, j - pad + kj
                        if 0 <= ii < H and 0 <= jj < W:
                            acc += kern[0, p, ki, kj] * planes[p, ii, jj]
            out[0, i, j] = sigmoid_scalar(acc)
    return out


@pytest.fixture
def params(rng):
    return cbam.init_cbam(rng, channels=8, reduction=4)


class TestChannelAttention:
    def test_zero_weights_give_half(self, rng):
        p = cbam.init_cbam(rng, 8, 4)
        p.mlp_w0.data[:] = 0
        p.mlp_w1.data[:] = 0
        x = Tensor(rng.standard_normal((8, 5, 5)))
        gate = cbam.channel_attention(p, x)
        assert np.allclose(gate.data, 0.5, atol=1e-15)

    def test_constant_map_doubles_descriptor(self, params, rng):
        x = Tensor(np.full((8, 4, 4), 1.7))
        gate = cbam.channel_attention(params, x)
        g = np.full(8, 1.7)
        h = np.maximum(params.mlp_w0.data @ g, 0.0)
        expect = sigmoid_scalar(2.0 * (params.mlp_w1.data @ h))
        assert np.max(np.abs(gate.data - expect)) < 1e-12

    def test_scalar_oracle(self, params, rng):
        x = rng.standard_normal((8, 4, 4))
        gate = cbam.channel_attention(params, Tensor(x))
        ref = channel_attention_scalar(params.mlp_w0.data,
                                       params.mlp_w1.data, x)
        assert np.max(np.abs(gate.data - ref)) < 1e-12

    def test_channel_mismatch(self, params, rng):
        with pytest.raises(DimensionError):
            cbam.channel_attention(params, Tensor(rng.standard_normal((4, 3, 3))))

    def test_entries_in_open_unit_interval(self, params, rng):
        x = Tensor(rng.standard_normal((8, 6, 6)) * 3)
        g = cbam.channel_attention(params, x).data
        assert np.all(g > 0) and np.all(g < 1)

    def test_permutation_equivariance(self, params, rng):
        x = rng.standard_normal((8, 5, 5))
        perm = rng.permutation(8)
        permuted = cbam.CbamParams(
            mlp_w0=Tensor(params.mlp_w0.data[:, perm]),
            mlp_w1=Tensor(params.mlp_w1.data[perm]),
            spatial_kernel=params.spatial_kernel,
            spatial_bias=params.spatial_bias,
            reduction=params.reduction)
        g = cbam.channel_attention(params, Tensor(x)).data
        gp = cbam.channel_attention(permuted, Tensor(x[perm])).data
        assert np.max(np.abs(gp - g[perm])) < 1e-12


class TestSpatialAttention:
    def test_zero_kernel_gives_half(self, params, rng):
        p = cbam.CbamParams(params.mlp_w0, params.mlp_w1,
                            Tensor(np.zeros((1, 2, 7, 7))), Tensor(np.zeros(1)),
                            params.reduction)
        x = Tensor(rng.standard_normal((8, 6, 6)))
        gate = cbam.spatial_attention(p, x)
        assert gate.data.shape == (1, 6, 6)
        assert np.allclose(gate.data, 0.5, atol=1e-15)

    def test_single_channel_pools_identical(self, rng):
        x = rng.standard_normal((1, 5, 5))
        pooled_max = ops.channel_pool(Tensor(x), "max").data
        pooled_avg = ops.channel_pool(Tensor(x), "average").data
        assert np.array_equal(pooled_max, pooled_avg)
        assert np.array_equal(pooled_max, x)

    def test_scalar_oracle(self, params, rng):
        x = rng.standard_normal((4, 6, 6))
        p = cbam.init_cbam(rng, 4, 4)
        gate = cbam.spatial_attention(p, Tensor(x))
        ref = spatial_attention_scalar(p.spatial_kernel.data,
                                       p.spatial_bias.data, x)
        assert np.max(np.abs(gate.data - ref)) < 1e-12


class TestCbamForward:
    def test_zero_params_quarter_input(self, rng):
        p = cbam.init_cbam(rng, 8, 4)
        for t in (p.mlp_w0, p.mlp_w1, p.spatial_kernel, p.spatial_bias):
            t.data[:] = 0
        x = rng.standard_normal((8, 5, 5))
        out = cbam.cbam_forward(p, Tensor(x))
        assert np.max(np.abs(out.data - 0.25 * x)) < 1e-15

    def test_attenuation_bound(self, params, rng):
        x = np.abs(rng.standard_normal((8, 6, 6)))
        out = cbam.cbam_forward(params, Tensor(x)).data
        assert np.all(out >= 0) and np.all(out <= x)

    def test_attenuation_any_sign(self, params, rng):
        x = rng.standard_normal((8, 6, 6)) * 4
        out = cbam.cbam_forward(params, Tensor(x)).data
        assert np.all(np.abs(out) <= np.abs(x))

    def test_shape_preserved_batched(self, params, rng):
        x = rng.standard_normal((3, 8, 6, 7))
        out = cbam.cbam_forward(params, Tensor(x))
        assert out.data.shape == x.shape

    def test_composition_oracle(self, params, rng):
        x = rng.standard_normal((8, 5, 5))
        out = cbam.cbam_forward(params, Tensor(x)).data
        mc = cbam.channel_attention(params, Tensor(x)).data
        gated = x * mc[:, None, None]
        ms = cbam.spatial_attention(params, Tensor(gated)).data
        ref = gated * ms
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_batched_matches_single(self, params, rng):
        x = rng.standard_normal((3, 8, 5, 5))
        out = cbam.cbam_forward(params, Tensor(x)).data
        for n in range(3):
            single = cbam.cbam_forward(params, Tensor(x[n])).data
            assert np.max(np.abs(out[n] - single)) < 1e-13

    def test_full_gradcheck(self, rng):
        p = cbam.init_cbam(rng, 4, 4)
        x = param(rng.standard_normal((4, 8, 8)))
        inputs = [x, p.mlp_w0, p.mlp_w1, p.spatial_kernel, p.spatial_bias]
        rep = gradcheck(
            lambda xi, w0, w1, sk, sb: cbam.cbam_forward(
                cbam.CbamParams(w0, w1, sk, sb, 4), xi),
            inputs, op_name="cbam_forward", max_coords=150)
        assert rep.passed, rep

    def test_reduction_divisibility(self, rng):
        with pytest.raises(ConfigurationError):
            cbam.init_cbam(rng, 6, 4)
