"""Thin-plate-spline fitting and evaluation against independent oracles:
a dense linear-solve oracle (numpy.linalg), a scalar kernel-sum oracle,
and midpoint quadrature of the bending-energy integrand."""

import math

import numpy as np
import pytest

from warpdetect import ops, tps
from warpdetect.errors import ConfigurationError, DomainError, TpsFitError
from warpdetect.gradcheck import gradcheck
from warpdetect.tensor import Tensor

from conftest import param


def fit_oracle(src, tgt, lam):
    """Independent dense-solve fit using numpy.linalg only."""
    N = len(src)
    d = np.linalg.norm(src[:, None] - src[None, :], axis=2)
    K = np.zeros_like(d)
    m = d > 0
    K[m] = d[m] ** 2 * np.log(d[m])
    P = np.hstack([np.ones((N, 1)), src])
    A = np.zeros((N + 3, N + 3))
    A[:N, :N] = K + lam * np.eye(N)
    A[:N, N:] = P
    A[N:, :N] = P.T
    rhs = np.vstack([tgt, np.zeros((3, 2))])
    sol = np.linalg.solve(A, rhs)
    return sol[:N], sol[N:].T


def energy_quadrature(params, half=2.0, n=400):
    """Midpoint quadrature of the integral of f_xx^2 + 2 f_xy^2 + f_yy^2."""
    h = 2.0 * half / n
    xs = -half + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    dx = pts[:, 0, None] - params.source[None, :, 0]
    dy = pts[:, 1, None] - params.source[None, :, 1]
    q = np.maximum(dx * dx + dy * dy, 1e-300)
    lq = np.log(q)
    fxx_b = lq + 1 + 2 * dx * dx / q
    fyy_b = lq + 1 + 2 * dy * dy / q
    fxy_b = 2 * dx * dy / q
    total = 0.0
    for c in range(2):
        w = params.weights[:, c]
        total += ((fxx_b @ w) ** 2 + 2 * (fxy_b @ w) ** 2
                  + (fyy_b @ w) ** 2).sum() * h * h
    return total


class TestKernel:
    def test_limit_at_zero(self):
        assert tps.tps_kernel(0.0) == 0.0

    def test_log_one(self):
        assert tps.tps_kernel(1.0) == 0.0

    def test_at_e(self):
        assert tps.tps_kernel(math.e) == pytest.approx(math.e ** 2, rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            tps.tps_kernel(-0.1)


class TestFit:
    def test_identity_warp(self, rng):
        src = rng.uniform(-1, 1, (6, 2))
        for lam in (0.0, 0.5, 10.0):
            p = tps.fit_tps(tps.ControlPointSet(src, src.copy()), lam)
            assert np.allclose(p.affine, [[0, 1, 0], [0, 0, 1]], atol=1e-9)
            assert np.max(np.abs(p.weights)) < 1e-9

    def test_pure_translation(self):
        src = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
        tgt = src + np.array([0.1, 0.0])
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
        assert np.allclose(p.affine, [[0.1, 1, 0], [0, 0, 1]], atol=1e-9)
        assert np.max(np.abs(p.weights)) < 1e-9
        assert tps.bending_energy(p) == pytest.approx(0.0, abs=1e-10)

    def test_interpolation_and_solve_oracle(self, rng):
        src = rng.uniform(-1, 1, (5, 2))
        tgt = rng.uniform(-1, 1, (5, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
        mapped = tps.transform_points(p, src)
        assert np.max(np.abs(mapped - tgt)) < 1e-9
        w_ref, a_ref = fit_oracle(src, tgt, 0.0)
        assert np.max(np.abs(p.weights - w_ref)) < 1e-9
        assert np.max(np.abs(p.affine - a_ref)) < 1e-9

    def test_side_conditions(self, rng):
        for lam in (0.0, 0.01, 1.0, 1e6):
            src = rng.uniform(-1, 1, (8, 2))
            tgt = src + rng.uniform(-0.3, 0.3, (8, 2))
            p = tps.fit_tps(tps.ControlPointSet(src, tgt), lam)
            assert p.side_condition_residual() < 1e-8

    def test_collinear_raises(self):
        src = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
        with pytest.raises(TpsFitError, match="degenerate control points"):
            tps.fit_tps(tps.ControlPointSet(src, src + 0.1), 0.0)

    def test_negative_lambda_rejected(self, rng):
        src = rng.uniform(-1, 1, (4, 2))
        with pytest.raises(DomainError):
            tps.fit_tps(tps.ControlPointSet(src, src), -0.5)

    def test_affine_reproduction_any_lambda(self, rng):
        # exact affine motion of the sources fits with zero weights
        src = rng.uniform(-1, 1, (7, 2))
        M = np.array([[0.9, 0.2], [-0.1, 1.1]])
        t = np.array([0.05, -0.1])
        tgt = src @ M.T + t
        for lam in (0.0, 0.1, 10.0):
            p = tps.fit_tps(tps.ControlPointSet(src, tgt), lam)
            assert np.max(np.abs(p.weights)) < 1e-8
            assert tps.bending_energy(p) == pytest.approx(0.0, abs=1e-10)

    def test_smoothing_monotonicity(self, rng):
        src = rng.uniform(-1, 1, (9, 2))
        tgt = src + rng.uniform(-0.4, 0.4, (9, 2))
        energies = [tps.bending_energy(
            tps.fit_tps(tps.ControlPointSet(src, tgt), lam))
            for lam in (0.0, 0.01, 0.1, 1.0, 10.0)]
        for e1, e2 in zip(energies, energies[1:]):
            assert e2 <= e1 + 1e-12

    def test_affine_limit(self, rng):
        src = rng.uniform(-1, 1, (6, 2))
        tgt = src + rng.uniform(-0.3, 0.3, (6, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 1e6)
        assert np.max(np.abs(p.weights)) <= 1e-4
        # direct least-squares affine fit oracle
        P = np.hstack([np.ones((6, 1)), src])
        aff, *_ = np.linalg.lstsq(P, tgt, rcond=None)
        assert np.max(np.abs(p.affine - aff.T)) < 1e-3


class TestTransform:
    def test_identity_params(self):
        p = tps.TpsParams(affine=np.array([[0.0, 1, 0], [0, 0, 1]]),
                          weights=np.zeros((3, 2)),
                          source=np.array([[0.0, 0], [1, 0], [0, 1]]), lam=0.0)
        pt = np.array([0.3, -0.7])
        assert np.allclose(tps.tps_transform(p, pt), pt, atol=1e-15)

    def test_worked_example_scalar_oracle(self):
        # three anchors, fixed affine and weights; expected output computed
        # beforehand by independent high-precision scalar evaluation
        p = tps.TpsParams(
            affine=np.array([[0.5, 1.0, 0.0], [0.5, 0.0, 1.0]]),
            weights=np.array([[0.1, 0.03], [-0.05, 0.01], [0.02, -0.02]]),
            source=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            lam=0.0)
        out = tps.tps_transform(p, np.array([10.0, 5.0]))
        assert out[0] == pytest.approx(33.833011880425786, abs=1e-12)
        assert out[1] == pytest.approx(11.510546355637826, abs=1e-12)

    def test_fitted_sources_map_to_targets(self, rng):
        src = rng.uniform(-1, 1, (6, 2))
        tgt = rng.uniform(-1, 1, (6, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
        for s, t in zip(src, tgt):
            assert np.max(np.abs(tps.tps_transform(p, s) - t)) < 1e-9


class TestBendingEnergy:
    def test_quadrature_oracle(self, rng):
        # compact configurations keep the [-2,2]^2 truncation error small
        src = rng.uniform(-0.3, 0.3, (6, 2))
        tgt = src + rng.uniform(-0.08, 0.08, (6, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
        closed = tps.bending_energy(p)
        quad = energy_quadrature(p)
        assert abs(quad - closed) / closed < 0.01

    def test_nonnegative(self, rng):
        for _ in range(20):
            src = rng.uniform(-1, 1, (5, 2))
            tgt = src + rng.uniform(-0.5, 0.5, (5, 2))
            p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
            assert tps.bending_energy(p) >= -1e-10


class TestGrid:
    def test_identity_grid_lattice(self):
        p = tps.TpsParams(affine=np.array([[0.0, 1, 0], [0, 0, 1]]),
                          weights=np.zeros((3, 2)),
                          source=np.array([[0.0, 0], [1, 0], [0, 1]]), lam=0.0)
        g = tps.make_grid(p, 3, 3)
        xs = np.array([-1.0, 0.0, 1.0])
        assert np.allclose(g.coords[..., 0], xs[None, :], atol=1e-12)
        assert np.allclose(g.coords[..., 1], xs[:, None], atol=1e-12)

    def test_translation_grid(self):
        p = tps.TpsParams(affine=np.array([[0.5, 1, 0], [0, 0, 1]]),
                          weights=np.zeros((3, 2)),
                          source=np.array([[0.0, 0], [1, 0], [0, 1]]), lam=0.0)
        g = tps.make_grid(p, 4, 4)
        base = tps.make_grid(tps.TpsParams(
            affine=np.array([[0.0, 1, 0], [0, 0, 1]]),
            weights=np.zeros((3, 2)), source=p.source, lam=0.0), 4, 4)
        assert np.allclose(g.coords[..., 0] - base.coords[..., 0], 0.5)
        assert np.allclose(g.coords[..., 1], base.coords[..., 1])

    def test_grid_matches_pointwise_transform(self, rng):
        src = rng.uniform(-1, 1, (5, 2))
        tgt = src + rng.uniform(-0.3, 0.3, (5, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.01)
        g = tps.make_grid(p, 8, 8)
        lattice = tps.normalized_lattice(8, 8)
        for idx, pt in enumerate(lattice):
            i, j = divmod(idx, 8)
            assert np.max(np.abs(g.coords[i, j] - tps.tps_transform(p, pt))) < 1e-12

    def test_too_small_rejected(self):
        p = tps.TpsParams(affine=np.array([[0.0, 1, 0], [0, 0, 1]]),
                          weights=np.zeros((3, 2)),
                          source=np.array([[0.0, 0], [1, 0], [0, 1]]), lam=0.0)
        with pytest.raises(ConfigurationError):
            tps.make_grid(p, 1, 8)

    def test_grid_gradcheck(self, rng):
        src = rng.uniform(-1, 1, (4, 2))
        aff = param(np.array([[0.0, 1, 0], [0, 0, 1]])
                    + 0.1 * rng.standard_normal((2, 3)))
        w = param(0.05 * rng.standard_normal((4, 2)))
        rep = gradcheck(
            lambda a, ww: tps.grid_from_params(a, ww, src, 5, 6),
            [aff, w], op_name="tps_grid")
        assert rep.passed, rep

    def test_grid_from_params_matches_make_grid(self, rng):
        src = rng.uniform(-1, 1, (5, 2))
        tgt = src + rng.uniform(-0.2, 0.2, (5, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.0)
        g1 = tps.make_grid(p, 6, 7)
        g2 = tps.grid_from_params(Tensor(p.affine), Tensor(p.weights),
                                  src, 6, 7)
        assert np.max(np.abs(g1.coords - g2.data)) < 1e-12


class TestSolveMatrix:
    def test_linear_in_targets(self, rng):
        src = rng.uniform(-1, 1, (6, 2))
        S = tps.solve_matrix(src, 0.01)
        tgt = src + rng.uniform(-0.3, 0.3, (6, 2))
        sol = S @ tgt
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.01)
        assert np.max(np.abs(sol[:6] - p.weights)) < 1e-10
        assert np.max(np.abs(sol[6:].T - p.affine)) < 1e-10


class TestParamsDocument:
    def test_roundtrip_exact(self, rng):
        src = rng.uniform(-1, 1, (5, 2))
        tgt = rng.uniform(-1, 1, (5, 2))
        p = tps.fit_tps(tps.ControlPointSet(src, tgt), 0.3)
        text = tps.params_to_text(p)
        q = tps.params_from_text(text)
        assert np.array_equal(p.affine, q.affine)
        assert np.array_equal(p.weights, q.weights)
        assert np.array_equal(p.source, q.source)
        assert p.lam == q.lam

    def test_malformed_rejected(self):
        with pytest.raises(ConfigurationError):
            tps.params_from_text("lambda nope\n")
