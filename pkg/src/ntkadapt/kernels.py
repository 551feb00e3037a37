"""Kernel backend selection.

The tape interpreter has two interchangeable implementations: a Cython
extension (fast path) and a pure NumPy fallback.  The extension is used
when it imports cleanly; set ``NTKADAPT_PURE_PYTHON=1`` to force the
fallback (used by the backend-parity tests and the benchmark script).
"""

import os

if os.environ.get("NTKADAPT_PURE_PYTHON", "") == "1":
    from ._kernels_py import forward, reverse, BACKEND
else:
    try:
        from ._kernels_c import forward, reverse, BACKEND
    except ImportError:  # pragma: no cover - depends on build environment
        from ._kernels_py import forward, reverse, BACKEND

__all__ = ["forward", "reverse", "BACKEND"]
