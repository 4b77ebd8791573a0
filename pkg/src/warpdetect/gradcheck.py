"""Finite-difference verification of analytic gradients.

Any op (or composition) is reduced to a scalar through a fixed random
projection, differentiated analytically via the recorded backward pass,
and compared against central differences coordinate by coordinate.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    passed: bool
    per_input_errors: list = field(default_factory=list)
    inconclusive: bool = False

    def __str__(self):
        state = "PASS" if self.passed else (
            "INCONCLUSIVE" if self.inconclusive else "FAIL")
        return (f"gradcheck[{self.op_name}] max_rel={self.max_relative_error:.3e} "
                f"{state}")


def _relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(fn, inputs, step=1e-5, tolerance=1e-4, op_name="op",
              seed=0, max_coords=None, probe=None):
    """Check d(projection . fn)/d(inputs) against central differences.

    fn maps the given Tensors to a Tensor of any shape; a seeded random
    projection reduces it to a scalar. ``max_coords`` caps how many
    coordinates per input are probed (all by default). ``probe(inputs,
    step)`` may flag a non-differentiable neighborhood, marking a failing
    report inconclusive instead.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ConfigurationError("gradcheck inputs must be Tensors with "
                                     "requires_grad=True")
    rng = np.random.default_rng(seed)

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    proj = rng.standard_normal(out.data.shape)
    scalar = float((out.data * proj).sum())
    if not np.isfinite(scalar):
        raise FloatingPointError("non-finite forward value in gradcheck")
    out.backward(seed=proj)

    def forward_scalar():
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    per_input = []
    worst = 0.0
    for t in inputs:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            # probe the best-conditioned directions: with a large objective,
            # central differences on near-zero-gradient coordinates measure
            # only f64 cancellation noise
            coords = np.argsort(-np.abs(aflat), kind="stable")[:max_coords]
        else:
            coords = np.arange(n)
        err = 0.0
        for idx in coords:
            keep = flat[idx]
            flat[idx] = keep + step
            fp = forward_scalar()
            flat[idx] = keep - step
            fm = forward_scalar()
            flat[idx] = keep
            numeric = (fp - fm) / (2.0 * step)
            err = max(err, _relative_error(aflat[idx], numeric))
        per_input.append(err)
        worst = max(worst, err)

    passed = worst <= tolerance
    inconclusive = False
    if not passed and probe is not None and probe(inputs, step):
        inconclusive = True
    return GradCheckReport(op_name=op_name, max_relative_error=worst,
                           passed=passed, per_input_errors=per_input,
                           inconclusive=inconclusive)


def maxpool_tie_probe(inputs, step):
    """Detects a max-pool tie within the finite-difference step: per channel,
    the two largest entries closer than 2*step make the check inconclusive."""
    for t in inputs:
        arr = t.data
        if arr.ndim < 2:
            continue
        flat = arr.reshape(arr.shape[0], -1) if arr.ndim == 3 else \
            arr.reshape(-1, arr.shape[-2] * arr.shape[-1])
        if flat.shape[1] < 2:
            continue
        part = np.sort(flat, axis=1)[:, -2:]
        if np.any(part[:, 1] - part[:, 0] < 2.0 * step):
            return True
    return False
