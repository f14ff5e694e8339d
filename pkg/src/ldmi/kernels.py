"""Kernel backend selection.

The compiled core (``ldmi._kernels``) is used when it was built; otherwise,
or when ``LDMI_PURE_PYTHON=1`` is set, the numpy fallback is used.  Both
expose the same functions.
"""

from __future__ import annotations

import os

from . import _fallback

if os.environ.get("LDMI_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

dynamic_routing = _impl.dynamic_routing
lazy_greedy = _impl.lazy_greedy
coverage_value = _impl.coverage_value
topk_neighbors = _impl.topk_neighbors


def backends() -> dict:
    """Every importable backend by name, for tests and benchmarks."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
