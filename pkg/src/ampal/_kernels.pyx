# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dilated convolution kernels (same contract as ``_kernels_py``)."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline void _axpy(real* dst, const real* src, real a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        dst[i] += a * src[i]


cdef inline void _mac(real* acc, const real* a, const real* b, Py_ssize_t n) noexcept nogil:
    # elementwise accumulate; reduced once at the end in a fixed order
    cdef Py_ssize_t i
    for i in range(n):
        acc[i] += a[i] * b[i]


cdef enum:
    TILE = 512


cdef inline void _span(Py_ssize_t t0, Py_ssize_t t1, Py_ssize_t shift, Py_ssize_t T,
                       Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # clip output range [t0, t1) so that source index t + shift stays in [0, T)
    lo[0] = t0 if t0 + shift >= 0 else -shift
    hi[0] = t1 if t1 + shift <= T else T - shift


def _fwd(real[:, :, ::1] x, real[:, :, ::1] w, real[:, :, ::1] out,
         Py_ssize_t dilation, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], T = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2], t_out = out.shape[2]
    cdef Py_ssize_t b, o, c, k, shift, t0, t1, lo, hi
    with nogil:
        for b in range(B):
            t0 = 0
            while t0 < t_out:
                t1 = t0 + TILE if t0 + TILE < t_out else t_out
                for o in range(Cout):
                    for c in range(Cin):
                        for k in range(K):
                            shift = k * dilation - pad
                            _span(t0, t1, shift, T, &lo, &hi)
                            if hi > lo:
                                _axpy(&out[b, o, lo], &x[b, c, lo + shift], w[o, c, k], hi - lo)
                t0 = t1


def _bwd_x(real[:, :, ::1] gout, real[:, :, ::1] w, real[:, :, ::1] gx,
           Py_ssize_t dilation, Py_ssize_t pad):
    cdef Py_ssize_t B = gx.shape[0], Cin = gx.shape[1], T = gx.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2], t_out = gout.shape[2]
    cdef Py_ssize_t b, o, c, k, shift, t0, t1, lo, hi
    with nogil:
        for b in range(B):
            t0 = 0
            while t0 < t_out:
                t1 = t0 + TILE if t0 + TILE < t_out else t_out
                for c in range(Cin):
                    for o in range(Cout):
                        for k in range(K):
                            shift = k * dilation - pad
                            _span(t0, t1, shift, T, &lo, &hi)
                            if hi > lo:
                                _axpy(&gx[b, c, lo + shift], &gout[b, o, lo], w[o, c, k], hi - lo)
                t0 = t1


def _bwd_w(real[:, :, ::1] gout, real[:, :, ::1] x, real[:, :, ::1] gw,
           Py_ssize_t dilation, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], T = x.shape[2]
    cdef Py_ssize_t Cout = gw.shape[0], K = gw.shape[2], t_out = gout.shape[2]
    cdef Py_ssize_t b, o, c, k, shift, t0, t1, lo, hi, i
    cdef real acc[TILE]
    cdef real s
    with nogil:
        for o in range(Cout):
            for c in range(Cin):
                for k in range(K):
                    shift = k * dilation - pad
                    for i in range(TILE):
                        acc[i] = 0
                    for b in range(B):
                        t0 = 0
                        while t0 < t_out:
                            t1 = t0 + TILE if t0 + TILE < t_out else t_out
                            _span(t0, t1, shift, T, &lo, &hi)
                            if hi > lo:
                                _mac(&acc[lo - t0], &gout[b, o, lo], &x[b, c, lo + shift], hi - lo)
                            t0 = t1
                    s = 0
                    for i in range(TILE):
                        s += acc[i]
                    gw[o, c, k] = s


def conv1d_forward(x, w, dilation, pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    t_out = x.shape[2] + pad - (w.shape[2] - 1) * dilation
    out = np.zeros((x.shape[0], w.shape[0], t_out), dtype=x.dtype)
    _fwd(x, w, out, dilation, pad)
    return out


def conv1d_backward(grad_out, x, w, dilation, pad, need_x=True, need_w=True):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    grad_out = np.ascontiguousarray(grad_out, dtype=x.dtype)
    gx = gw = None
    if need_x:
        gx = np.zeros_like(x)
        _bwd_x(grad_out, w, gx, dilation, pad)
    if need_w:
        gw = np.zeros_like(w)
        _bwd_w(grad_out, x, gw, dilation, pad)
    return gx, gw
