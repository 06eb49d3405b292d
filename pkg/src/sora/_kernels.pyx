# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the gated low-rank hot loop.

All products use a fixed i-k-j loop order so results are bit-reproducible
for identical inputs. The public functions mirror ``_kernels_py`` exactly.
"""
import numpy as np

NAME = "ext"


cdef void _mm(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # out[i, :] accumulates a[i, l] * b[l, :] for l = 0, 1, ... in order
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double aik
    cdef double* orow
    cdef const double* brow
    for i in range(n):
        orow = &out[i, 0]
        for j in range(m):
            orow[j] = 0.0
        for l in range(k):
            aik = a[i, l]
            brow = &b[l, 0]
            for j in range(m):
                orow[j] += aik * brow[j]


cdef void _mm_tn(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # out = a.T @ b, same accumulation order as _mm
    cdef Py_ssize_t k = a.shape[0], n = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double ali
    cdef double* orow
    cdef const double* brow
    for i in range(n):
        orow = &out[i, 0]
        for j in range(m):
            orow[j] = 0.0
    for l in range(k):
        brow = &b[l, 0]
        for i in range(n):
            ali = a[l, i]
            orow = &out[i, 0]
            for j in range(m):
                orow[j] += ali * brow[j]


cdef void _mm_nt(const double[:, ::1] a, const double[:, ::1] bt, double[:, ::1] out) noexcept nogil:
    # out = a @ b.T given bt = b.T (contiguous)
    _mm(a, bt, out)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _need(ok, a, b):
    if not ok:
        raise ValueError(f"incompatible operand shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a, b):
    cdef const double[:, ::1] av = _c(a)
    cdef const double[:, ::1] bv = _c(b)
    _need(av.shape[1] == bv.shape[0], av, bv)
    out = np.empty((av.shape[0], bv.shape[1]))
    cdef double[:, ::1] o = out
    with nogil:
        _mm(av, bv, o)
    return out


def matmul_tn(a, b):
    cdef const double[:, ::1] av = _c(a)
    cdef const double[:, ::1] bv = _c(b)
    _need(av.shape[0] == bv.shape[0], av, bv)
    out = np.empty((av.shape[1], bv.shape[1]))
    cdef double[:, ::1] o = out
    with nogil:
        _mm_tn(av, bv, o)
    return out


def matmul_nt(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _need(a.ndim == b.ndim == 2 and a.shape[1] == b.shape[1], a, b)
    cdef const double[:, ::1] av = _c(a)
    cdef const double[:, ::1] bv = _c(b.T)
    out = np.empty((av.shape[0], bv.shape[1]))
    cdef double[:, ::1] o = out
    with nogil:
        _mm_nt(av, bv, o)
    return out


def gated_forward(wd, wu, gate, x):
    cdef const double[:, ::1] wdv = _c(wd)
    cdef const double[:, ::1] wuv = _c(wu)
    cdef const double[:, ::1] xv = _c(x)
    cdef const double[::1] g = _c(gate)
    cdef Py_ssize_t r = wdv.shape[0], n = xv.shape[1], i, s
    _need(wdv.shape[1] == xv.shape[0] and wuv.shape[1] == r and g.shape[0] == r, wdv, xv)
    h = np.empty((r, n))
    hp = np.empty((r, n))
    z = np.empty((wuv.shape[0], n))
    cdef double[:, ::1] hv = h, hpv = hp, zv = z
    with nogil:
        _mm(wdv, xv, hv)
        for i in range(r):
            for s in range(n):
                hpv[i, s] = g[i] * hv[i, s]
        _mm(wuv, hpv, zv)
    return h, hp, z


def gated_backward(wd, wu, gate, x, h, hp, grad_z):
    cdef const double[:, ::1] wdv = _c(wd)
    cdef const double[:, ::1] wuv = _c(wu)
    cdef const double[:, ::1] xv = _c(x)
    cdef const double[:, ::1] gzv = _c(grad_z)
    cdef const double[::1] g = _c(gate)
    cdef const double[:, ::1] hv = _c(h)
    cdef const double[:, ::1] hptv = _c(np.asarray(hp).T)
    cdef const double[:, ::1] xtv = _c(np.asarray(x).T)
    cdef Py_ssize_t r = wdv.shape[0], n = xv.shape[1], i, s
    cdef double acc
    _need(wdv.shape[1] == xv.shape[0] and wuv.shape[1] == r and g.shape[0] == r
          and gzv.shape[0] == wuv.shape[0] and gzv.shape[1] == n
          and hv.shape[0] == r and hv.shape[1] == n and hptv.shape[1] == r and hptv.shape[0] == n, wdv, gzv)
    gu = np.empty((r, n))
    gwd = np.empty((r, n))
    d_gate = np.empty(r)
    d_wu = np.empty((wuv.shape[0], r))
    d_wd = np.empty((r, wdv.shape[1]))
    grad_x = np.empty((wdv.shape[1], n))
    cdef double[:, ::1] guv = gu, gwdv = gwd, dwuv = d_wu, dwdv = d_wd, gxv = grad_x
    cdef double[::1] dgv = d_gate
    with nogil:
        _mm_tn(wuv, gzv, guv)
        for i in range(r):
            acc = 0.0
            for s in range(n):
                acc = acc + guv[i, s] * hv[i, s]
                gwdv[i, s] = g[i] * guv[i, s]
            dgv[i] = acc
        _mm_nt(gzv, hptv, dwuv)
        _mm_nt(gwdv, xtv, dwdv)
        _mm_tn(wdv, gwdv, gxv)
    return d_wd, d_wu, d_gate, grad_x


def soft_threshold(v, double xi):
    cdef const double[::1] src = _c(v)
    cdef Py_ssize_t n = src.shape[0], i
    cdef double a
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            a = src[i]
            if a > xi:
                o[i] = a - xi
            elif a <= -xi:
                o[i] = a + xi
            else:
                o[i] = 0.0
    return out


def prox_step(gate, d_gate, double eta, double lam):
    cdef const double[::1] g = _c(gate)
    cdef const double[::1] dg = _c(d_gate)
    cdef Py_ssize_t n = g.shape[0], i
    cdef double xi = eta * lam
    cdef double a
    _need(dg.shape[0] == n, g, dg)
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            a = g[i] - eta * dg[i]
            if a > xi:
                o[i] = a - xi
            elif a <= -xi:
                o[i] = a + xi
            else:
                o[i] = 0.0
    return out
