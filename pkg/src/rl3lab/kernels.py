"""Selects the compiled value-iteration kernel when available.

Set ``RL3LAB_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _vi_fallback

BACKEND = "python"
finite_horizon_vi = _vi_fallback.finite_horizon_vi

if os.environ.get("RL3LAB_PURE_PYTHON", "") not in ("1", "true"):
    try:
        from ._ext.vi_kernel import finite_horizon_vi  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass
