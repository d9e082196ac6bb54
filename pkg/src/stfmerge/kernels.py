"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``STFMERGE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from stfmerge import _kernels_py

if os.environ.get("STFMERGE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from stfmerge import _kernels as _impl
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"
    else:
        BACKEND = "cython"

topk_magnitude_mask = _impl.topk_magnitude_mask
bf16_to_f32 = _impl.bf16_to_f32
f32_to_bf16 = _impl.f32_to_bf16

__all__ = ["BACKEND", "topk_magnitude_mask", "bf16_to_f32", "f32_to_bf16"]
