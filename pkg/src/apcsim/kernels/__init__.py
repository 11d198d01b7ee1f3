"""Hot numeric kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``APCSIM_KERNELS=numpy``
to force the fallback.  ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

_requested = os.environ.get("APCSIM_KERNELS", "auto").lower()
_impl = _fallback
if _requested not in ("numpy", "python", "fallback"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested in ("cython", "compiled"):
            raise
        _impl = _fallback

BACKEND: str = _impl.NAME


def available_backends() -> dict:
    backends = {"numpy": _fallback}
    try:
        from . import _ckernels
        backends["cython"] = _ckernels
    except ImportError:
        pass
    return backends


def _c4(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, stride, pad):
    return _impl.conv2d_forward(_c4(x), _c4(w), _c4(b), int(stride), int(pad))


def conv2d_backward(x, w, grad_y, stride, pad):
    return _impl.conv2d_backward(_c4(x), _c4(w), _c4(grad_y), int(stride), int(pad))


def maxpool2d_forward(x, window, stride):
    return _impl.maxpool2d_forward(_c4(x), int(window), int(stride))


def maxpool2d_backward(grad_y, index, input_shape):
    return _impl.maxpool2d_backward(_c4(grad_y), np.ascontiguousarray(index, dtype=np.int64),
                                    tuple(int(d) for d in input_shape))


def activation_stats(a):
    return _impl.activation_stats(_c4(a).ravel())


def prob_entropy(p):
    return float(_impl.prob_entropy(_c4(p).ravel()))


def abs_entropy(a):
    return float(_impl.abs_entropy(_c4(a).ravel()))


def fnv1a64(data: bytes) -> int:
    if _impl is _fallback:
        return _fallback.fnv1a64(data)
    return int(_impl.fnv1a64(data))


M_SPARSITY, M_ZERO, M_DENSE, M_ENTROPY, M_FLOPS, M_MACS, M_TOPS = 1, 2, 4, 8, 16, 32, 64
ENTROPY_ABS, ENTROPY_PROB, ENTROPY_SOFTMAX = 0, 1, 2


def layer_row(a, row, index, mask, entropy_mode, flops, macs, elapsed_us):
    """Fill ``row`` (11 float64 slots, NaN = absent) with one layer's counter values."""
    return _impl.layer_row(a, row, index, mask, entropy_mode, float(flops), float(macs), float(elapsed_us))


def format_layers(table, kinds) -> bytes:
    return _impl.format_layers(table, kinds)


def format_number(v, is_int) -> bytes:
    return _impl.format_number(v, is_int)
