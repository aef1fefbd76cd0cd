"""Kernel dispatch: the Cython build when importable, NumPy otherwise.

Set ``ULTRABM_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("ULTRABM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python kernels requested")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

order_mismatch_count = _impl.order_mismatch_count
