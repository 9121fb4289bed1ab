"""Backend selection for the conv2d hot loops.

The compiled Cython extension is preferred; set ``FLSIM_PURE_PYTHON=1`` to
force the numpy implementation. ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

if os.environ.get("FLSIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
fnv1a_32 = _impl.fnv1a_32

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward", "fnv1a_32"]
