"""Dynamic networks with hardware-efficient weight slicing.

A small self-contained library: a numpy-backed autodiff tensor core,
layers that execute on contiguous slices of shared full-size weights,
an input-dependent routing gate, the two-stage training pipeline and a
latency benchmark comparing sliced, masked and indexed execution.
"""

import os as _os

# DSNET_NUM_THREADS caps kernel-internal (BLAS) parallelism.  The env vars
# below only take effect if set before numpy loads the BLAS runtime, so this
# must stay ahead of any numpy import in the package.
_nt = _os.environ.get("DSNET_NUM_THREADS")
if _nt:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _nt)
del _os, _nt

from .tensor import (  # noqa: E402
    BoundsError,
    ShapeError,
    SliceSpec,
    Tensor,
    UsageError,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "SliceSpec",
    "ShapeError",
    "BoundsError",
    "UsageError",
    "no_grad",
]
