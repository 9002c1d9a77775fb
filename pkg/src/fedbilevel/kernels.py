"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``FEDBILEVEL_PURE_PYTHON=1``) the numpy fallback is used.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FEDBILEVEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

neumann_chain = _impl.neumann_chain


def backends():
    """Map of backend name to module for every backend importable here."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return out
    out["cython"] = _compiled
    return out
