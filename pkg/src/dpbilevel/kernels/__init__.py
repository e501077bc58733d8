"""Backend selection for the hot inner loop.

The compiled extension is used when it was built and importable; otherwise, or
when ``DPBILEVEL_PURE_PYTHON=1`` is set, the numpy fallback is used. Both
consume identical pre-drawn noise, so they agree to rounding (about 1e-12), not
bit for bit.
"""
import os

from . import _fallback

BACKEND = "python"
affine_round = _fallback.affine_round

if os.environ.get("DPBILEVEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _affine
    except ImportError:
        pass
    else:
        affine_round = _affine.affine_round
        BACKEND = "cython"

__all__ = ["affine_round", "BACKEND"]
