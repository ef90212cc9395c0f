# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Must stay result-identical to ``_pykernels``.

Element ranges are flat row-major indices into the output.  Integer paths
accumulate in int64 (callers pre-check the overflow bound) and requantize
through a 128-bit product; float paths accumulate doubles in loop order.
"""

from libc.stdint cimport int64_t

cdef extern from *:
    ctypedef long long int128_t "__int128"


cdef inline int64_t _requant(int64_t acc, int64_t m0, int shift, int64_t lo, int64_t hi) noexcept nogil:
    cdef int128_t v, q, r, half
    if m0 == 0:
        return acc
    v = <int128_t>acc * <int128_t>m0
    if shift > 0:
        q = v >> shift
        r = v - (q << shift)
        half = (<int128_t>1) << (shift - 1)
        if r > half or (r == half and (q & 1)):
            q += 1
    else:
        q = v << (-shift)
    if q < lo:
        return lo
    if q > hi:
        return hi
    return <int64_t>q


def gemm_range_i(const int64_t[:, ::1] A, const int64_t[:, ::1] B, int64_t[:, ::1] out,
                 Py_ssize_t start, Py_ssize_t stop,
                 int64_t m0=0, int shift=0, int64_t lo=0, int64_t hi=0):
    cdef Py_ssize_t n = B.shape[1], kdim = A.shape[1]
    cdef Py_ssize_t e, i, j, k
    cdef int64_t acc
    with nogil:
        for e in range(start, stop):
            i = e // n
            j = e - i * n
            acc = 0
            for k in range(kdim):
                acc = acc + A[i, k] * B[k, j]
            out[i, j] = _requant(acc, m0, shift, lo, hi)


def gemm_range_f(const double[:, ::1] A, const double[:, ::1] B, double[:, ::1] out,
                 Py_ssize_t start, Py_ssize_t stop):
    cdef Py_ssize_t n = B.shape[1], kdim = A.shape[1]
    cdef Py_ssize_t e, i, j, k
    cdef double acc
    with nogil:
        for e in range(start, stop):
            i = e // n
            j = e - i * n
            acc = 0.0
            for k in range(kdim):
                acc = acc + A[i, k] * B[k, j]
            out[i, j] = acc


def conv_range_i(const int64_t[:, :, ::1] x, const int64_t[:, :, :, ::1] w, int64_t[:, :, ::1] out,
                 Py_ssize_t start, Py_ssize_t stop,
                 int64_t m0=0, int shift=0, int64_t lo=0, int64_t hi=0):
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t e, f, rem, i, j, c, a, b
    cdef int64_t acc
    with nogil:
        for e in range(start, stop):
            f = e // (ho * wo)
            rem = e - f * ho * wo
            i = rem // wo
            j = rem - i * wo
            acc = 0
            for c in range(cin):
                for a in range(kh):
                    for b in range(kw):
                        acc = acc + x[c, i + a, j + b] * w[f, c, a, b]
            out[f, i, j] = _requant(acc, m0, shift, lo, hi)


def conv_range_f(const double[:, :, ::1] x, const double[:, :, :, ::1] w, double[:, :, ::1] out,
                 Py_ssize_t start, Py_ssize_t stop):
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t e, f, rem, i, j, c, a, b
    cdef double acc
    with nogil:
        for e in range(start, stop):
            f = e // (ho * wo)
            rem = e - f * ho * wo
            i = rem // wo
            j = rem - i * wo
            acc = 0.0
            for c in range(cin):
                for a in range(kh):
                    for b in range(kw):
                        acc = acc + x[c, i + a, j + b] * w[f, c, a, b]
            out[f, i, j] = acc


def conv1d_i(const int64_t[::1] x, const int64_t[::1] k, int64_t[::1] out):
    cdef Py_ssize_t n = out.shape[0], m = k.shape[0], t, j
    cdef int64_t acc
    with nogil:
        for t in range(n):
            acc = 0
            for j in range(m):
                acc = acc + x[t + j] * k[j]
            out[t] = acc


def conv1d_f(const double[::1] x, const double[::1] k, double[::1] out):
    cdef Py_ssize_t n = out.shape[0], m = k.shape[0], t, j
    cdef double acc
    with nogil:
        for t in range(n):
            acc = 0.0
            for j in range(m):
                acc = acc + x[t + j] * k[j]
            out[t] = acc
