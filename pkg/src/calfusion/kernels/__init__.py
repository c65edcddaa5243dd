"""Inner-loop kernels with an optional numba backend.

The backend is chosen once at import time.  Set ``CALFUSION_NUMBA=0`` to
force the pure-numpy path (also used automatically when numba is missing).
Both backends are importable directly as ``kernels.numpy_backend`` and
``kernels.numba_backend`` for cross-checking and benchmarking.
"""

import os

from . import _numpy as numpy_backend
from ._numpy import EXPONENTIAL, IDENTITY, LOGISTIC

try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba_backend = None

_want_numba = os.environ.get("CALFUSION_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if _want_numba and numba_backend is not None:
    BACKEND = "numba"
    _impl = numba_backend
else:
    BACKEND = "numpy"
    _impl = numpy_backend

el_objective = _impl.el_objective
el_terms = _impl.el_terms
link_draw_moments = _impl.link_draw_moments

__all__ = [
    "BACKEND", "IDENTITY", "LOGISTIC", "EXPONENTIAL",
    "el_objective", "el_terms", "link_draw_moments",
    "numpy_backend", "numba_backend",
]
