"""Backend selection for the hot-loop kernels.

The compiled extension is preferred when importable; setting the
environment variable TELEOP_TWIN_PURE=1 forces the pure-Python fallback
(used by the backend-equivalence tests and the benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("TELEOP_TWIN_PURE"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        _impl = _kernels_py
        BACKEND = "python"

arma_forecast = _impl.arma_forecast
spring_track = _impl.spring_track
pid_track = _impl.pid_track
