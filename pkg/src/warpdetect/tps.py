"""Thin-plate-spline fitting, evaluation, bending energy, and dense
sampling-grid generation.

A warp T(x,y) = a0 + a1*x + a2*y + sum_i w_i * U(|(x,y) - s_i|) with
U(r) = r^2 ln r is fitted per output coordinate by solving the augmented
system [[K + lambda*I, P], [P^T, 0]] [w; a] = [v; 0]. The side conditions
sum w = sum w*x = sum w*y = 0 make the warp asymptotically affine, and at
lambda = 0 it interpolates the targets exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, TpsFitError
from .tensor import Tensor
from . import ops

# pivot magnitudes below this abort the fit as degenerate
PIVOT_TOL = 1e-12

# side conditions must hold to this absolute tolerance
SIDE_TOL = 1e-8


def tps_kernel(r):
    """Radial kernel U(r) = r^2 ln r, with U(0) = 0 by continuity."""
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("tps_kernel requires r >= 0")
    out = np.zeros_like(arr)
    pos = arr > 0
    out[pos] = arr[pos] ** 2 * np.log(arr[pos])
    return out if arr.ndim else float(out)


@dataclass
class ControlPointSet:
    """Paired source/target landmarks in normalized [-1,1] coordinates."""
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.source.ndim != 2 or self.source.shape[1] != 2:
            raise DomainError(f"source must be (N,2), got {self.source.shape}")
        if self.source.shape != self.target.shape:
            raise DomainError("source and target shapes differ")
        if len(self.source) < 3:
            raise DomainError("need at least 3 control points")


@dataclass
class TpsParams:
    """Fitted warp: affine rows (a0,a1,a2) per output coordinate, per-point
    weights, the source anchors, and the smoothing weight lambda."""
    affine: np.ndarray        # (2,3)
    weights: np.ndarray       # (N,2)
    source: np.ndarray        # (N,2)
    lam: float

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.source = np.asarray(self.source, dtype=np.float64)
        if self.affine.shape != (2, 3):
            raise DomainError(f"affine must be (2,3), got {self.affine.shape}")
        if self.weights.shape != self.source.shape:
            raise DomainError("weights and source shapes differ")
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")

    @property
    def n_points(self):
        return len(self.source)

    def side_condition_residual(self):
        """max |sum w|, |sum w x|, |sum w y| over both output coordinates."""
        P = np.hstack([np.ones((self.n_points, 1)), self.source])
        return float(np.abs(P.T @ self.weights).max())

    def check(self):
        resid = self.side_condition_residual()
        if resid > SIDE_TOL:
            raise DomainError(f"side conditions violated: residual {resid:.3e}")


@dataclass
class SamplingGrid:
    """Backward-warp coordinates: where each output pixel reads the input."""
    height: int
    width: int
    coords: np.ndarray        # (H,W,2), normalized [-1,1] (may exceed range)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (self.height, self.width, 2):
            raise DomainError(f"coords shape {self.coords.shape} != "
                              f"({self.height},{self.width},2)")
        if not np.all(np.isfinite(self.coords)):
            raise DomainError("grid coordinates must be finite")


def lu_factor(A, pivot_tol=PIVOT_TOL):
    """Dense LU with partial pivoting; returns (LU, perm).

    Raises TpsFitError when the largest available pivot falls below
    ``pivot_tol`` (rank-deficient system).
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    perm = np.arange(n)
    for col in range(n):
        p = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[p, col]) < pivot_tol:
            raise TpsFitError(
                f"degenerate control points: pivot {abs(A[p, col]):.3e} "
                f"below {pivot_tol:g} at column {col}")
        if p != col:
            A[[col, p]] = A[[p, col]]
            perm[[col, p]] = perm[[p, col]]
        A[col + 1:, col] /= A[col, col]
        A[col + 1:, col + 1:] -= np.outer(A[col + 1:, col], A[col, col + 1:])
    return A, perm


def lu_solve(lu_perm, b):
    LU, perm = lu_perm
    n = LU.shape[0]
    x = np.array(b, dtype=np.float64)[perm]
    for col in range(n):                      # forward: L y = Pb
        x[col + 1:] -= np.outer(LU[col + 1:, col], x[col])
    for col in range(n - 1, -1, -1):          # backward: U x = y
        x[col] /= LU[col, col]
        x[:col] -= np.outer(LU[:col, col], x[col])
    return x


def _kernel_matrix(source):
    d = np.linalg.norm(source[:, None, :] - source[None, :, :], axis=2)
    return tps_kernel(d)


def _system_matrix(source, lam):
    N = len(source)
    K = _kernel_matrix(source)
    P = np.hstack([np.ones((N, 1)), source])
    A = np.zeros((N + 3, N + 3))
    A[:N, :N] = K + lam * np.eye(N)
    A[:N, N:] = P
    A[N:, :N] = P.T
    return A, K


def fit_tps(points, lam=0.0):
    """Fit TPS parameters mapping points.source onto points.target.

    At lambda = 0 the fitted warp interpolates every target; growing
    lambda trades exactness for smoothness, approaching the least-squares
    affine fit.
    """
    if not isinstance(points, ControlPointSet):
        points = ControlPointSet(*points)
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    N = len(points.source)
    A, _ = _system_matrix(points.source, lam)
    rhs = np.zeros((N + 3, 2))
    rhs[:N] = points.target
    sol = lu_solve(lu_factor(A), rhs)
    params = TpsParams(affine=sol[N:].T, weights=sol[:N],
                       source=points.source.copy(), lam=float(lam))
    params.check()
    return params


def solve_matrix(source, lam):
    """S with [w; a] = S @ targets, i.e. the first N columns of the system
    inverse. Constant per (source, lambda); the warp is linear in targets."""
    source = np.asarray(source, dtype=np.float64)
    N = len(source)
    A, _ = _system_matrix(source, lam)
    lu = lu_factor(A)
    E = np.zeros((N + 3, N))
    E[:N] = np.eye(N)
    return lu_solve(lu, E)


def tps_basis(points, source):
    """Rows [U(|p - s_1|) ... U(|p - s_N|), 1, x, y] for each query point."""
    points = np.asarray(points, dtype=np.float64)
    d = np.linalg.norm(points[:, None, :] - source[None, :, :], axis=2)
    return np.hstack([tps_kernel(d), np.ones((len(points), 1)), points])


def transform_points(params, points):
    """Apply the warp to an (M,2) array of points."""
    B = tps_basis(np.atleast_2d(points), params.source)
    coef = np.vstack([params.weights, params.affine.T])   # (N+3, 2)
    return B @ coef


def tps_transform(params, point):
    """Warp a single (x, y) point; returns a length-2 array."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (2,):
        raise DomainError(f"point must be a 2-vector, got shape {point.shape}")
    return transform_points(params, point[None])[0]


def bending_energy(params):
    """Value of the bending-energy integral for both output coordinates.

    For U(r) = r^2 ln r the integral of (f_xx^2 + 2 f_xy^2 + f_yy^2) over
    the plane equals 8*pi * w^T K w per coordinate (the affine part
    contributes nothing).
    """
    K = _kernel_matrix(params.source)
    w = params.weights
    return float(8.0 * np.pi * ((w[:, 0] @ K @ w[:, 0]) + (w[:, 1] @ K @ w[:, 1])))


def normalized_lattice(height, width):
    """(H*W, 2) align-corners lattice over [-1,1]^2, x fastest."""
    xs = np.linspace(-1.0, 1.0, width)
    ys = np.linspace(-1.0, 1.0, height)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def make_grid(params, height, width):
    """Evaluate the warp at every output pixel center (backward warp)."""
    if height < 2 or width < 2:
        raise ConfigurationError("grid dimensions must be >= 2")
    pts = normalized_lattice(height, width)
    coords = transform_points(params, pts).reshape(height, width, 2)
    return SamplingGrid(height=height, width=width, coords=coords)


def grid_from_params(affine, weights, source, height, width):
    """Differentiable grid construction from affine (2,3) and weights (N,2)
    Tensors; the basis matrix is constant."""
    if height < 2 or width < 2:
        raise ConfigurationError("grid dimensions must be >= 2")
    B = tps_basis(normalized_lattice(height, width), np.asarray(source))
    aff_t = ops.transpose(affine, (1, 0))                 # (3,2)
    coef = ops.concat([weights, aff_t], axis=0)           # (N+3,2)
    flat = ops.matmul(Tensor(B), coef)
    return ops.reshape(flat, (height, width, 2))


# -- plain-text parameter documents -----------------------------------------

def params_to_text(params):
    lines = [f"lambda {params.lam:.17g}", f"n {params.n_points}", "source"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in params.source]
    lines.append("affine")
    lines += [f"{r[0]:.17g} {r[1]:.17g} {r[2]:.17g}" for r in params.affine]
    lines.append("weights")
    lines += [f"{x:.17g} {y:.17g}" for x, y in params.weights]
    return "\n".join(lines) + "\n"


def params_from_text(text):
    toks = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    try:
        lam = float(toks[0].split()[1])
        n = int(toks[1].split()[1])
        assert toks[2] == "source"
        src = np.array([[float(v) for v in toks[3 + i].split()]
                        for i in range(n)])
        assert toks[3 + n] == "affine"
        aff = np.array([[float(v) for v in toks[4 + n + i].split()]
                        for i in range(2)])
        assert toks[6 + n] == "weights"
        wts = np.array([[float(v) for v in toks[7 + n + i].split()]
                        for i in range(n)])
    except (IndexError, ValueError, AssertionError) as exc:
        raise ConfigurationError(f"malformed TPS parameter document: {exc}")
    return TpsParams(affine=aff, weights=wts, source=src, lam=lam)
