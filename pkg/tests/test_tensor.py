"""Tensor basics: graph bookkeeping, invariants, binary serialization."""

import io

import numpy as np
import pytest

from warpdetect import ops, serial
from warpdetect.errors import ConfigurationError, DimensionError
from warpdetect.tensor import Tensor, no_grad

from conftest import param


def test_shape_data_consistency(rng):
    t = Tensor(rng.standard_normal((2, 3, 4)))
    assert t.data.size == int(np.prod(t.shape))
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]


def test_grad_matches_shape_after_backward(rng):
    x = param(rng.standard_normal((3, 5)))
    y = ops.sum_all(ops.mul(x, x))
    y.backward()
    assert x.grad.shape == x.data.shape
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar(rng):
    x = param(rng.standard_normal((3, 5)))
    y = ops.mul(x, x)
    with pytest.raises(DimensionError):
        y.backward()


def test_gradient_accumulates_on_reuse(rng):
    x = param(np.array([2.0]))
    y = ops.add(ops.mul(x, x), ops.mul(x, x))   # 2x^2
    ops.sum_all(y).backward()
    assert np.allclose(x.grad, [8.0])


def test_no_grad_blocks_graph(rng):
    x = param(rng.standard_normal(4))
    with no_grad():
        y = ops.mul(x, x)
    assert not y.requires_grad
    assert y._backward is None


def test_finite_assertion(rng):
    t = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(FloatingPointError):
        t.assert_finite("test")


class TestSerialization:
    def test_container_roundtrip(self, rng):
        arr = rng.standard_normal((3, 4, 5))
        buf = io.BytesIO()
        serial.dump_tensor(buf, arr)
        buf.seek(0)
        back = serial.load_tensor(buf)
        assert np.array_equal(arr, back)
        # layout: magic, u32 rank, u64 dims, f64 payload
        raw = buf.getvalue()
        assert raw[:4] == b"WDT1"
        assert int.from_bytes(raw[4:8], "little") == 3
        dims = [int.from_bytes(raw[8 + 8 * i:16 + 8 * i], "little")
                for i in range(3)]
        assert dims == [3, 4, 5]
        assert len(raw) == 4 + 4 + 24 + 8 * arr.size

    def test_bad_magic_rejected(self):
        with pytest.raises(ConfigurationError):
            serial.load_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_archive_roundtrip(self, tmp_path, rng):
        named = {"conv.w": rng.standard_normal((2, 3)),
                 "conv.b": rng.standard_normal(3),
                 "scalar": np.asarray(4.0)}
        path = tmp_path / "params.wda"
        serial.save_archive(path, named)
        back = serial.load_archive(path)
        assert list(back) == list(named)
        for k in named:
            assert np.array_equal(np.asarray(named[k]), back[k])
