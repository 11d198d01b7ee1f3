"""Pure numpy implementations of the hot kernels.

Signatures and results match ``_ckernels`` (up to floating point summation
order); this module is used when the compiled extension is unavailable.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _columns(x, kh, kw, stride, pad):
    xp = _pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d_forward(x, w, b, stride, pad):
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, oh, ow = _columns(x, kh, kw, stride, pad)
    y = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad_y, stride, pad):
    """Return ``(grad_x, grad_w, grad_b)``."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols, oh, ow = _columns(x, kh, kw, stride, pad)
    gy = grad_y.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    grad_w = (gy.T @ cols).reshape(w.shape)
    grad_b = gy.sum(axis=0)
    gcols = (gy @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2d_forward(x, window, stride):
    """Max over windows; ``index`` holds the flat (h*W + w) position of the first maximum."""
    n, c, h, wd = x.shape
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2:4]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, window)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    index = (rows * wd + cols).astype(np.int64)
    return np.ascontiguousarray(y), index


def maxpool2d_backward(grad_y, index, input_shape):
    n, c, h, wd = input_shape
    grad = np.zeros((n * c, h * wd))
    gy = grad_y.reshape(n * c, -1)
    idx = index.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(grad, (rows, idx.ravel()), gy.ravel())
    return grad.reshape(input_shape)


def activation_stats(a):
    """``(zero_count, total, minimum, maximum)`` over a flat float64 array."""
    return int(np.count_nonzero(a == 0.0)), float(a.sum()), float(a.min()), float(a.max())


def prob_entropy(p):
    """-sum p log p in nats, with 0 log 0 = 0."""
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def abs_entropy(a):
    """Entropy of the normalized magnitude distribution |a_i| / sum |a_j|; 0 for all-zero input."""
    m = np.abs(a)
    s = m.sum()
    if s == 0.0:
        return 0.0
    return prob_entropy(m / s)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ---- per-layer counter row and record serialization --------------------------

M_SPARSITY, M_ZERO, M_DENSE, M_ENTROPY, M_FLOPS, M_MACS, M_TOPS = 1, 2, 4, 8, 16, 32, 64
_NAMES = ("layer_index", "sparsity", "zero_count", "avg_activation", "max_activation", "min_activation",
          "entropy", "flops", "macs", "tops", "element_count")
_IS_INT = (1, 0, 1, 0, 0, 0, 0, 1, 1, 0, 1)


def _softmax(a):
    e = np.exp(a - a.max())
    return e / e.sum()


def layer_row(a, row, index, mask, entropy_mode, flops, macs, elapsed_us):
    n = a.size
    row[:] = np.nan
    row[0] = index
    row[10] = n
    if mask & (M_SPARSITY | M_ZERO | M_DENSE):
        zeros, total, lo, hi = activation_stats(a)
        if mask & M_SPARSITY:
            row[1] = zeros / n
        if mask & M_ZERO:
            row[2] = zeros
        if mask & M_DENSE:
            row[3] = min(max(total / n, lo), hi)
            row[4] = hi
            row[5] = lo
    if mask & M_ENTROPY:
        if entropy_mode == 1:
            h = prob_entropy(a)
        elif entropy_mode == 2:
            h = prob_entropy(_softmax(a))
        else:
            h = abs_entropy(a)
        row[6] = min(max(h, 0.0), float(np.log(n)))
    if mask & M_FLOPS:
        row[7] = flops
    if mask & M_MACS:
        row[8] = macs
    if mask & M_TOPS:
        row[9] = 0.0 if flops == 0 else flops / (elapsed_us * 1e-6 * 1e12)
    return row


def format_number(v, is_int):
    if v != v:
        return b"null"
    if is_int:
        return str(int(v)).encode()
    s = format(float(v), ".17g")
    if "." not in s and "e" not in s:
        s += ".0"
    return s.encode()


def format_layers(table, kinds):
    parts = []
    for li in range(table.shape[0]):
        row = table[li]
        items = [b'{"layer_index":' + format_number(row[0], 1), b',"layer_kind":"' + kinds[li] + b'"']
        for f in range(1, 11):
            items.append(b',"' + _NAMES[f].encode() + b'":' + format_number(row[f], _IS_INT[f]))
        parts.append(b"".join(items) + b"}")
    return b",".join(parts)
