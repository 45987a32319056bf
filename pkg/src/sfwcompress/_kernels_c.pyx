# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_kernels_py`` line for line."""
from libc.math cimport sqrt, fabs, copysign, hypot, INFINITY
from libc.stdlib cimport malloc, free

NAME = "cython"


cdef inline double _dot(double[:, ::1] a, Py_ssize_t p, Py_ssize_t q, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += a[p, i] * a[q, i]
    return acc


cdef inline void _rotate(double[:, ::1] a, Py_ssize_t p, Py_ssize_t q, Py_ssize_t n,
                         double c, double s) noexcept nogil:
    cdef Py_ssize_t i
    cdef double x, y
    for i in range(n):
        x = a[p, i]
        y = a[q, i]
        a[p, i] = c * x - s * y
        a[q, i] = s * x + c * y


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, double tol, int max_sweeps, double zero_sq=0.0):
    cdef Py_ssize_t r = at.shape[0]
    cdef Py_ssize_t n = at.shape[1]
    cdef Py_ssize_t m = vt.shape[1]
    cdef Py_ssize_t p, q
    cdef int sweep, used = -1
    cdef bint rotated
    cdef double alpha, beta, gamma, zeta, t, c, s
    with nogil:
        for sweep in range(1, max_sweeps + 1):
            rotated = False
            for p in range(r - 1):
                for q in range(p + 1, r):
                    alpha = _dot(at, p, p, n)
                    beta = _dot(at, q, q, n)
                    gamma = _dot(at, p, q, n)
                    if gamma == 0.0 or alpha <= zero_sq or beta <= zero_sq or fabs(gamma) <= tol * sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = copysign(1.0, zeta) / (fabs(zeta) + hypot(1.0, zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    _rotate(at, p, q, n, c, s)
                    _rotate(vt, p, q, m, c, s)
            if not rotated:
                used = sweep
                break
    return used


def ksupport_norm_sorted(double[::1] z, Py_ssize_t k):
    cdef Py_ssize_t d = z.shape[0]
    cdef Py_ssize_t j, r, lo
    cdef double *tail
    cdef double *head_sq
    cdef double mean, upper, slack, out = -1.0
    cdef int attempt
    if d == 0:
        return 0.0
    if k > d:
        k = d
    tail = <double *> malloc((d + 1) * sizeof(double))
    head_sq = <double *> malloc((d + 1) * sizeof(double))
    if tail == NULL or head_sq == NULL:
        free(tail)
        free(head_sq)
        raise MemoryError()
    try:
        tail[d] = 0.0
        for j in range(d - 1, -1, -1):
            tail[j] = tail[j + 1] + z[j]
        head_sq[0] = 0.0
        for j in range(d):
            head_sq[j + 1] = head_sq[j] + z[j] * z[j]
        for attempt in range(2):
            slack = 0.0 if attempt == 0 else 1e-12 * z[0]
            for r in range(k):
                lo = k - r - 1
                mean = tail[lo] / (r + 1)
                upper = z[lo - 1] if lo >= 1 else INFINITY
                if upper + slack >= mean and mean + slack >= z[lo]:
                    out = sqrt(head_sq[lo] + tail[lo] * tail[lo] / (r + 1))
                    break
            if out >= 0.0:
                break
    finally:
        free(tail)
        free(head_sq)
    if out < 0.0:
        raise ArithmeticError("k-support norm: no admissible split index")
    return out
