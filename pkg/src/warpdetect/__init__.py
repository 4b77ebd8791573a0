"""warpdetect: thin-plate-spline spatial transformers, CBAM attention, and
a miniature detection head, with a synthetic occlusion/deformation
benchmark harness."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad
from .errors import (ConfigurationError, DimensionError, DomainError,
                     TpsFitError, WarpdetectError)
