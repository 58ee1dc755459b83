"""Backend selection for the hot convolution, pooling and batch-norm kernels.

The compiled extension is used when it imports cleanly; otherwise, or when
``CONADV_PURE_PYTHON=1`` is set, the numpy fallback is used. ``BACKEND``
names the active implementation.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("CONADV_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
batchnorm_train_forward = _impl.batchnorm_train_forward
batchnorm_eval_forward = _impl.batchnorm_eval_forward
batchnorm_backward = _impl.batchnorm_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool2_forward",
    "maxpool2_backward",
    "batchnorm_train_forward",
    "batchnorm_eval_forward",
    "batchnorm_backward",
]
