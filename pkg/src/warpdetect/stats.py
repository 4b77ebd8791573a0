"""Paired t-test with a self-contained Student-t tail probability.

The two-sided p-value comes from the regularized incomplete beta
function: p = I_{nu/(nu+t^2)}(nu/2, 1/2), evaluated with a Lentz-style
continued fraction.
"""

import math
from dataclasses import dataclass

from .errors import DimensionError

_MAX_ITER = 300
_EPS = 1e-15
_FPMIN = 1e-300


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise FloatingPointError("incomplete beta continued fraction did not "
                             "converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DimensionError("beta parameters must be positive")
    if x < 0 or x > 1:
        raise DimensionError("x must lie in [0,1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, dof):
    """Two-sided tail probability of Student's t with `dof` degrees."""
    if dof < 1:
        raise DimensionError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    significant_at_05: bool
    degenerate: bool = False


def paired_t_test(series_a, series_b):
    """Paired t-test on equal-length series.

    Degenerate cases are flagged rather than erroring: all-zero
    differences report p = 1, zero-variance nonzero-mean differences
    report p = 0.
    """
    a = [float(v) for v in series_a]
    b = [float(v) for v in series_b]
    if len(a) != len(b):
        raise DimensionError(f"series lengths differ: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise DimensionError("paired t-test needs n >= 2")
    d = [x - y for x, y in zip(a, b)]
    mean = sum(d) / n
    var = sum((v - mean) ** 2 for v in d) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, significant_at_05=False,
                               degenerate=True)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p=0.0, significant_at_05=True,
                           degenerate=True)
    t = mean / math.sqrt(var / n)
    p = t_two_sided_p(t, n - 1)
    return TTestResult(t=t, p=p, significant_at_05=bool(p < 0.05))
