# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled inner loops. Pure-Python equivalents live in ``_kernels_py``."""


def order_mismatch_count(const double[::1] a, const double[::1] b):
    """Count ordered pairs (p, q) where ``a[p] >= a[q]`` and ``b[p] >= b[q]`` disagree."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q
    cdef long long count = 0
    cdef double ap, bp
    if b.shape[0] != n:
        raise ValueError("inputs must have equal length")
    with nogil:
        for p in range(n):
            ap = a[p]
            bp = b[p]
            for q in range(n):
                if (ap >= a[q]) != (bp >= b[q]):
                    count += 1
    return count
