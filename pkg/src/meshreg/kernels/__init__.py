"""Hot-kernel backend selection.

``MESHREG_BACKEND`` picks the implementation at import time:

* ``auto`` (default): numba if importable, else pure numpy
* ``numba``: require the @njit kernels
* ``numpy``: force the pure-numpy fallback

Both backends export the same names; `benchmarks/bench_backends.py`
compares them.
"""

from __future__ import annotations

import os

# Keep BLAS single-threaded: the GEMMs here are small, and OpenBLAS
# worker spin-waits otherwise starve the numba parallel regions that the
# hot kernels rely on (~10x step-time regression on 2 cores).
import threadpoolctl

threadpoolctl.threadpool_limits(1, "blas")

_choice = os.environ.get("MESHREG_BACKEND", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"MESHREG_BACKEND={_choice!r} not one of auto|numba|numpy")

if _choice == "numpy":
    from . import _numpy_impl as _impl
elif _choice == "numba":
    from . import _numba_impl as _impl
else:
    try:
        from . import _numba_impl as _impl
    except ImportError:
        from . import _numpy_impl as _impl

BACKEND = _impl.BACKEND_NAME

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
rasterize = _impl.rasterize
drr_accumulate = _impl.drr_accumulate
voxelize_parity = _impl.voxelize_parity
make_linear_operator = _impl.make_linear_operator

if BACKEND == "numba":
    from ._numpy_impl import trilinear
else:
    trilinear = _impl.trilinear


def active_backend() -> str:
    return BACKEND
