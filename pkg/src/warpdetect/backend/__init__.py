"""Kernel backend selection.

The compiled Cython core is used when its extension imported cleanly;
otherwise the pure-numpy fallback serves the same API. Override with
``WARPDETECT_BACKEND={auto,compiled,python}`` before import.
"""

import os

from . import numpy_impl

try:
    from . import compiled_impl
except ImportError:
    compiled_impl = None

_requested = os.environ.get("WARPDETECT_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(f"WARPDETECT_BACKEND must be auto/compiled/python, "
                       f"got {_requested!r}")
if _requested == "compiled" and compiled_impl is None:
    raise RuntimeError("WARPDETECT_BACKEND=compiled but the extension "
                       "is not built; run `python setup.py build_ext --inplace`")

if _requested == "python" or compiled_impl is None:
    _impl = numpy_impl
else:
    _impl = compiled_impl

NAME = _impl.NAME


def available():
    """Names of the importable backends."""
    names = ["numpy"]
    if compiled_impl is not None:
        names.append("compiled")
    return names


def get(name):
    """Fetch a backend module by name (for benchmarks and equivalence tests)."""
    if name == "numpy":
        return numpy_impl
    if name == "compiled":
        if compiled_impl is None:
            raise RuntimeError("compiled backend not built")
        return compiled_impl
    raise KeyError(name)


conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
avgpool2_forward = _impl.avgpool2_forward
avgpool2_backward = _impl.avgpool2_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
