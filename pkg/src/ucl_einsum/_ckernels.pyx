# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loop nest for dense block contraction."""

from libc.math cimport exp

cdef enum:
    MULTIPLY = 0
    ADD = 1
    SUBTRACT = 2
    DIVIDE = 3
    LEFT_ONLY = 4

cdef enum:
    IDENTITY = 0
    RELU = 1
    EXP = 2
    SCALE = 3
    SQUARE = 4


cdef inline double _combine(int code, double a, double b) noexcept nogil:
    if code == MULTIPLY:
        return a * b
    elif code == ADD:
        return a + b
    elif code == SUBTRACT:
        return a - b
    elif code == DIVIDE:
        return a / b
    return a


cdef inline double _unary(int code, double x, double scale) noexcept nogil:
    if code == IDENTITY:
        return x
    elif code == RELU:
        return x if x > 0.0 else 0.0
    elif code == EXP:
        return exp(x)
    elif code == SCALE:
        return scale * x
    return x * x


def contract(const double[::1] u, const double[::1] v, double[::1] out,
             const long long[::1] extents, const long long[::1] su,
             const long long[::1] sv, const long long[::1] so,
             int combine, int aggregate, int unary, double scale):
    """Accumulate unary(combine(u, v)) into ``out`` over the full loop nest.

    Strides are element strides per loop label (0 where a label is absent).
    ``aggregate`` is 0 for sum and 1 for max.  Returns the nest size.
    """
    cdef Py_ssize_t nl = extents.shape[0]
    cdef long long total = 1
    cdef Py_ssize_t d
    for d in range(nl):
        total *= extents[d]
    if total == 0:
        return 0
    cdef long long idx[64]
    if nl > 64:
        raise ValueError("at most 64 loop labels are supported")
    for d in range(nl):
        idx[d] = 0
    cdef long long it, pu = 0, pv = 0, po = 0
    cdef double x
    with nogil:
        for it in range(total):
            x = _unary(unary, _combine(combine, u[pu], v[pv]), scale)
            if aggregate == 0:
                out[po] += x
            elif x > out[po]:
                out[po] = x
            d = nl - 1
            while d >= 0:
                idx[d] += 1
                pu += su[d]
                pv += sv[d]
                po += so[d]
                if idx[d] < extents[d]:
                    break
                pu -= su[d] * extents[d]
                pv -= sv[d] * extents[d]
                po -= so[d] * extents[d]
                idx[d] = 0
                d -= 1
    return total
