"""Dilated convolution kernels, compiled when available.

The Cython extension ``ampal._kernels`` is preferred; if it was not built the
numpy implementation in ``ampal._kernels_py`` is used instead. Set
``AMPAL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("AMPAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward

__all__ = ["BACKEND", "conv1d_forward", "conv1d_backward"]
