# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: convolution, max pooling, activation statistics, FNV-1a."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, fabs
from libc.stdint cimport uint64_t

cnp.import_array()

NAME = "cython"


cdef inline void _col_range(Py_ssize_t ow, Py_ssize_t wd, Py_ssize_t stride, Py_ssize_t off,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns j with 0 <= j*stride + off < wd
    cdef Py_ssize_t a = 0, b = ow
    while a < ow and a * stride + off < 0:
        a += 1
    while b > a and (b - 1) * stride + off >= wd:
        b -= 1
    lo[0] = a
    hi[0] = b


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    out = np.empty((n, o, oh, ow))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t bi, oi, ci, i, j, ki, kj, r, off, jlo, jhi
    cdef double wv
    with nogil:
        for bi in range(n):
            for oi in range(o):
                for i in range(oh):
                    for j in range(ow):
                        y[bi, oi, i, j] = b[oi]
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[oi, ci, ki, kj]
                            off = kj - pad
                            _col_range(ow, wd, stride, off, &jlo, &jhi)
                            for i in range(oh):
                                r = i * stride + ki - pad
                                if r < 0 or r >= h:
                                    continue
                                for j in range(jlo, jhi):
                                    y[bi, oi, i, j] += wv * x[bi, ci, r, j * stride + off]
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] grad_y, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = grad_y.shape[2], ow = grad_y.shape[3]
    gx_arr = np.zeros((n, c, h, wd))
    gw_arr = np.zeros((o, c, kh, kw))
    gb_arr = np.zeros(o)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t bi, oi, ci, i, j, ki, kj, r, off, jlo, jhi
    cdef double wv, acc
    with nogil:
        for bi in range(n):
            for oi in range(o):
                acc = 0.0
                for i in range(oh):
                    for j in range(ow):
                        acc = acc + grad_y[bi, oi, i, j]
                gb[oi] += acc
                for ci in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[oi, ci, ki, kj]
                            off = kj - pad
                            _col_range(ow, wd, stride, off, &jlo, &jhi)
                            acc = 0.0
                            for i in range(oh):
                                r = i * stride + ki - pad
                                if r < 0 or r >= h:
                                    continue
                                for j in range(jlo, jhi):
                                    acc = acc + grad_y[bi, oi, i, j] * x[bi, ci, r, j * stride + off]
                                    gx[bi, ci, r, j * stride + off] += grad_y[bi, oi, i, j] * wv
                            gw[oi, ci, ki, kj] += acc
    return gx_arr, gw_arr, gb_arr


def maxpool2d_forward(const double[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oh = (h - window) // stride + 1
    cdef Py_ssize_t ow = (wd - window) // stride + 1
    out = np.empty((n, c, oh, ow))
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] y = out
    cdef cnp.int64_t[:, :, :, ::1] ix = idx
    cdef Py_ssize_t bi, ci, i, j, ki, kj, r, s, best_pos
    cdef double best, v
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        r = i * stride
                        s = j * stride
                        best = x[bi, ci, r, s]
                        best_pos = r * wd + s
                        for ki in range(window):
                            for kj in range(window):
                                v = x[bi, ci, r + ki, s + kj]
                                if v > best:
                                    best = v
                                    best_pos = (r + ki) * wd + s + kj
                        y[bi, ci, i, j] = best
                        ix[bi, ci, i, j] = best_pos
    return out, idx


def maxpool2d_backward(const double[:, :, :, ::1] grad_y, const cnp.int64_t[:, :, :, ::1] index,
                       tuple input_shape):
    cdef Py_ssize_t n = input_shape[0], c = input_shape[1], h = input_shape[2], wd = input_shape[3]
    cdef Py_ssize_t oh = grad_y.shape[2], ow = grad_y.shape[3]
    gx_arr = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, i, j, pos
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        pos = index[bi, ci, i, j]
                        gx[bi, ci, pos // wd, pos % wd] += grad_y[bi, ci, i, j]
    return gx_arr


def activation_stats(const double[::1] a):
    cdef Py_ssize_t i, n = a.shape[0]
    cdef Py_ssize_t zeros = 0
    cdef double total = 0.0, lo = a[0], hi = a[0], v
    with nogil:
        for i in range(n):
            v = a[i]
            if v == 0.0:
                zeros += 1
            total += v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
    return zeros, total, lo, hi


def prob_entropy(const double[::1] p):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double acc = 0.0, v
    with nogil:
        for i in range(n):
            v = p[i]
            if v > 0.0:
                acc -= v * log(v)
    return acc


def abs_entropy(const double[::1] a):
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double s = 0.0, acc = 0.0, v
    with nogil:
        for i in range(n):
            s += fabs(a[i])
        if s != 0.0:
            for i in range(n):
                v = fabs(a[i]) / s
                if v > 0.0:
                    acc -= v * log(v)
    return acc


def fnv1a64(const unsigned char[::1] data):
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h = (h ^ data[i]) * 0x100000001B3ULL
    return h


# ---- per-layer counter row and record serialization -------------------------
# Row columns: layer_index, sparsity, zero_count, avg, max, min, entropy,
# flops, macs, tops, element_count.  NaN marks an absent family.

from libc.math cimport exp, NAN, isnan
from libc.stdio cimport snprintf
from libc.string cimport strchr, memcpy

DEF M_SPARSITY = 1
DEF M_ZERO = 2
DEF M_DENSE = 4
DEF M_ENTROPY = 8
DEF M_FLOPS = 16
DEF M_MACS = 32
DEF M_TOPS = 64


cdef extern from *:
    """
    static void apc_stats(const double *a, Py_ssize_t n, double *zeros, double *sum, double *lo, double *hi) {
        double z = 0.0, s = 0.0, l = a[0], h = a[0];
        Py_ssize_t i;
        #pragma omp simd reduction(+:z, s) reduction(min:l) reduction(max:h)
        for (i = 0; i < n; i++) {
            double v = a[i];
            z += (v == 0.0);
            s += v;
            l = v < l ? v : l;
            h = v > h ? v : h;
        }
        *zeros = z; *sum = s; *lo = l; *hi = h;
    }

    """
    void apc_stats(const double *a, Py_ssize_t n, double *zeros, double *sum, double *lo, double *hi) noexcept nogil


cdef double _entropy(const double[::1] a, int mode) noexcept nogil:
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double s = 0.0, acc = 0.0, m, e
    if mode == 1:
        for i in range(n):
            if a[i] > 0.0:
                acc -= a[i] * log(a[i])
        return acc
    if mode == 2:
        # log p_i = (a_i - m) - log s, so H = log s - sum(p_i (a_i - m))
        m = a[0]
        for i in range(n):
            if a[i] > m:
                m = a[i]
        for i in range(n):
            e = exp(a[i] - m)
            s += e
            acc += e * (a[i] - m)
        return log(s) - acc / s
    # with p_i = |a_i| / s: H = log s - sum(|a_i| log |a_i|) / s
    for i in range(n):
        e = fabs(a[i])
        s += e
        if e > 0.0:
            acc += e * log(e)
    if s == 0.0:
        return 0.0
    return log(s) - acc / s


def layer_row(const double[::1] a, double[::1] row, Py_ssize_t index, int mask, int entropy_mode,
              double flops, double macs, double elapsed_us):
    cdef Py_ssize_t i, n = a.shape[0], zeros = 0
    cdef double total = 0.0, lo = a[0], hi = a[0], zf = 0.0, avg, h, cap
    with nogil:
        for i in range(11):
            row[i] = NAN
        row[0] = index
        row[10] = n
        if mask & (M_SPARSITY | M_ZERO | M_DENSE):
            apc_stats(&a[0], n, &zf, &total, &lo, &hi)
            zeros = <Py_ssize_t>zf
            if mask & M_SPARSITY:
                row[1] = <double>zeros / n
            if mask & M_ZERO:
                row[2] = zeros
            if mask & M_DENSE:
                avg = total / n
                if avg < lo:
                    avg = lo
                if avg > hi:
                    avg = hi
                row[3] = avg
                row[4] = hi
                row[5] = lo
        if mask & M_ENTROPY:
            h = _entropy(a, entropy_mode)
            cap = log(<double>n)
            if h < 0.0:
                h = 0.0
            if h > cap:
                h = cap
            row[6] = h
        if mask & M_FLOPS:
            row[7] = flops
        if mask & M_MACS:
            row[8] = macs
        if mask & M_TOPS:
            if flops == 0.0:
                row[9] = 0.0
            else:
                row[9] = flops / (elapsed_us * 1e-6 * 1e12)
    return row


cdef const char* _NAMES[11]
_NAMES[0] = b'{"layer_index":'
_NAMES[1] = b',"sparsity":'
_NAMES[2] = b',"zero_count":'
_NAMES[3] = b',"avg_activation":'
_NAMES[4] = b',"max_activation":'
_NAMES[5] = b',"min_activation":'
_NAMES[6] = b',"entropy":'
_NAMES[7] = b',"flops":'
_NAMES[8] = b',"macs":'
_NAMES[9] = b',"tops":'
_NAMES[10] = b',"element_count":'
cdef int _IS_INT[11]
_IS_INT[:] = [1, 0, 1, 0, 0, 0, 0, 1, 1, 0, 1]


cdef Py_ssize_t _put(char* buf, Py_ssize_t pos, const char* s) noexcept nogil:
    while s[0] != 0:
        buf[pos] = s[0]
        pos += 1
        s += 1
    return pos


cdef Py_ssize_t _put_number(char* buf, Py_ssize_t pos, double v, int is_int) noexcept nogil:
    cdef char tmp[40]
    cdef int k
    if isnan(v):
        return _put(buf, pos, b"null")
    if is_int:
        k = snprintf(tmp, 40, "%lld", <long long>v)
    else:
        k = snprintf(tmp, 40, "%.17g", v)
        if strchr(tmp, 46) == NULL and strchr(tmp, 101) == NULL:  # no '.' and no 'e'
            tmp[k] = 46
            tmp[k + 1] = 48
            tmp[k + 2] = 0
    return _put(buf, pos, tmp)


def format_layers(const double[:, ::1] table, list kinds):
    """The ``"layers":[...]`` array body as ASCII bytes."""
    cdef Py_ssize_t L = table.shape[0], li, f, pos = 0
    cdef Py_ssize_t cap = 64 + L * (11 * 48 + 64)
    cdef bytes kind
    buf_obj = bytearray(cap)
    cdef char* buf = buf_obj
    cdef const char* kp
    for li in range(L):
        if li:
            buf[pos] = 44
            pos += 1
        kind = kinds[li]
        kp = kind
        pos = _put(buf, pos, _NAMES[0])
        pos = _put_number(buf, pos, table[li, 0], 1)
        pos = _put(buf, pos, b',"layer_kind":"')
        pos = _put(buf, pos, kp)
        buf[pos] = 34
        pos += 1
        for f in range(1, 11):
            pos = _put(buf, pos, _NAMES[f])
            pos = _put_number(buf, pos, table[li, f], _IS_INT[f])
        buf[pos] = 125
        pos += 1
    return bytes(buf_obj[:pos])


def format_number(double v, bint is_int):
    cdef char tmp[48]
    cdef Py_ssize_t k = _put_number(tmp, 0, v, is_int)
    return tmp[:k]
