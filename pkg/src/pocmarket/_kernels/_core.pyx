# cython: language_level=3
# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled exact integer kernels.

Same contracts as ``_fallback``: exact accumulation in 128-bit integers,
one floor division per rescaled output, Mersenne-prime modular products
for random projections. Inputs whose conservative magnitude bound does
not fit the 128-bit accumulator are delegated to the pure-Python path so
both backends agree bit for bit on every input.
"""

import numpy as np

from pocmarket.errors import Overflow
from pocmarket._kernels import _fallback

from libc.stdint cimport int64_t, uint64_t

cdef extern from *:
    ctypedef long long i128 "__int128"

cdef i128 RAW_LIMIT = (<i128>1) << 62
cdef i128 SCALE = 1 << 16
cdef uint64_t PRIME = ((<uint64_t>1) << 61) - 1

# conservative bound under which sums of products cannot overflow i128
_ACC_SAFE = 1 << 126


cdef inline i128 _floordiv(i128 a, i128 d) noexcept nogil:
    cdef i128 q = a / d
    if a % d != 0 and (a < 0):
        q -= 1
    return q


cdef inline uint64_t _red64(int64_t a) noexcept nogil:
    cdef int64_t r = a % <int64_t>PRIME
    if r < 0:
        r += <int64_t>PRIME
    return <uint64_t>r


cdef inline uint64_t _mod_p(i128 x) noexcept nogil:
    # valid for 0 <= x < 2**124
    x = (x & <i128>PRIME) + (x >> 61)
    x = (x & <i128>PRIME) + (x >> 61)
    if x >= <i128>PRIME:
        x -= <i128>PRIME
    return <uint64_t>x


cdef object _py(i128 x):
    cdef bint neg = x < 0
    cdef uint64_t lo, hi
    if neg:
        x = -x
    lo = <uint64_t>(x & <i128>0xFFFFFFFFFFFFFFFF)
    hi = <uint64_t>(x >> 64)
    if hi == 0:
        val = int(lo)
    else:
        val = (int(hi) << 64) | int(lo)
    return -val if neg else val


def _max_abs(arr):
    if arr.size == 0:
        return 0
    return max(abs(int(arr.max())), abs(int(arr.min())))


def matmul_floor(a_in, b_in):
    a = np.ascontiguousarray(a_in, dtype=np.int64)
    b = np.ascontiguousarray(b_in, dtype=np.int64)
    if a.shape[1] * _max_abs(a) * _max_abs(b) >= _ACC_SAFE:
        return _fallback.matmul_floor(a, b)
    cdef const int64_t[:, ::1] A = a
    cdef const int64_t[:, ::1] B = b
    cdef Py_ssize_t n = A.shape[0], k = A.shape[1], m = B.shape[1]
    c_out = np.empty((n, m), dtype=np.int64)
    r_out = np.empty((n, m), dtype=np.int64)
    cdef int64_t[:, ::1] C = c_out
    cdef int64_t[:, ::1] R = r_out
    cdef Py_ssize_t i, j, t
    cdef i128 acc, q
    for i in range(n):
        for j in range(m):
            acc = 0
            for t in range(k):
                acc += <i128>A[i, t] * <i128>B[t, j]
            q = _floordiv(acc, SCALE)
            if q >= RAW_LIMIT or q <= -RAW_LIMIT:
                raise Overflow("matmul result exceeds raw range")
            C[i, j] = <int64_t>q
            R[i, j] = <int64_t>(acc - q * SCALE)
    return c_out, r_out


def linear_floor(x_in, w_in, bias_in):
    x = np.ascontiguousarray(x_in, dtype=np.int64)
    w = np.ascontiguousarray(w_in, dtype=np.int64)
    bias = np.ascontiguousarray(bias_in, dtype=np.int64)
    bound = x.shape[1] * _max_abs(x) * _max_abs(w) + (1 << 16) * _max_abs(bias)
    if bound >= _ACC_SAFE:
        return _fallback.linear_floor(x, w, bias)
    cdef const int64_t[:, ::1] X = x
    cdef const int64_t[:, ::1] W = w
    cdef const int64_t[::1] BV = bias
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], k = W.shape[1]
    out = np.empty((n, k), dtype=np.int64)
    rem = np.empty((n, k), dtype=np.int64)
    cdef int64_t[:, ::1] O = out
    cdef int64_t[:, ::1] R = rem
    cdef Py_ssize_t i, j, t
    cdef i128 acc, q
    for i in range(n):
        for j in range(k):
            acc = (<i128>BV[j]) * SCALE
            for t in range(d):
                acc += <i128>X[i, t] * <i128>W[t, j]
            q = _floordiv(acc, SCALE)
            if q >= RAW_LIMIT or q <= -RAW_LIMIT:
                raise Overflow("affine output exceeds raw range")
            O[i, j] = <int64_t>q
            R[i, j] = <int64_t>(acc - q * SCALE)
    return out, rem


def weighted_sum_floor(models_in, weights_in, divisor):
    models = np.ascontiguousarray(models_in, dtype=np.int64)
    weights = np.ascontiguousarray(weights_in, dtype=np.int64)
    divisor = int(divisor)
    if divisor <= 0:
        raise Overflow("divisor must be positive")
    wsum = int(np.abs(weights).sum()) if weights.size else 0
    if wsum * _max_abs(models) >= _ACC_SAFE or divisor >= int(RAW_LIMIT):
        return _fallback.weighted_sum_floor(models, weights, divisor)
    cdef const int64_t[:, ::1] M = models
    cdef const int64_t[::1] Wt = weights
    cdef i128 D = <i128><int64_t>divisor
    cdef Py_ssize_t L = M.shape[0], n = M.shape[1]
    agg_out = np.empty(n, dtype=np.int64)
    rem_out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] G = agg_out
    cdef int64_t[::1] R = rem_out
    cdef Py_ssize_t i, j
    cdef i128 acc, q
    for j in range(n):
        acc = 0
        for i in range(L):
            acc += <i128>Wt[i] * <i128>M[i, j]
        q = _floordiv(acc, D)
        if q >= RAW_LIMIT or q <= -RAW_LIMIT:
            raise Overflow("aggregate exceeds raw range")
        G[j] = <int64_t>q
        R[j] = <int64_t>(acc - q * D)
    return agg_out, rem_out


def sum_rows_exact(models_in):
    models = np.ascontiguousarray(models_in, dtype=np.int64)
    if models.shape[0] * _max_abs(models) >= _ACC_SAFE:
        return _fallback.sum_rows_exact(models)
    cdef const int64_t[:, ::1] M = models
    cdef Py_ssize_t L = M.shape[0], n = M.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] O = out
    cdef Py_ssize_t i, j
    cdef i128 acc
    for j in range(n):
        acc = 0
        for i in range(L):
            acc += <i128>M[i, j]
        if acc >= RAW_LIMIT or acc <= -RAW_LIMIT:
            raise Overflow("row sum exceeds raw range")
        O[j] = <int64_t>acc
    return out


def gram_exact(rows_in):
    rows = np.ascontiguousarray(rows_in, dtype=np.int64)
    if rows.shape[1] * _max_abs(rows) ** 2 >= _ACC_SAFE:
        return _fallback.gram_exact(rows)
    cdef const int64_t[:, ::1] Rw = rows
    cdef Py_ssize_t L = Rw.shape[0], n = Rw.shape[1]
    cdef Py_ssize_t i, j, t
    cdef i128 acc
    out = [[0] * L for _ in range(L)]
    for i in range(L):
        for j in range(i, L):
            acc = 0
            for t in range(n):
                acc += <i128>Rw[i, t] * <i128>Rw[j, t]
            v = _py(acc)
            out[i][j] = v
            out[j][i] = v
    return out


def sq_norm_rows(rows_in):
    rows = np.ascontiguousarray(rows_in, dtype=np.int64)
    if rows.shape[1] * _max_abs(rows) ** 2 >= _ACC_SAFE:
        return _fallback.sq_norm_rows(rows)
    cdef const int64_t[:, ::1] Rw = rows
    cdef Py_ssize_t L = Rw.shape[0], n = Rw.shape[1]
    cdef Py_ssize_t i, t
    cdef i128 acc
    out = []
    for i in range(L):
        acc = 0
        for t in range(n):
            acc += <i128>Rw[i, t] * <i128>Rw[i, t]
        out.append(_py(acc))
    return out


def dot_exact(a_in, b_in):
    a = np.ascontiguousarray(a_in, dtype=np.int64)
    b = np.ascontiguousarray(b_in, dtype=np.int64)
    if a.shape[0] * _max_abs(a) * _max_abs(b) >= _ACC_SAFE:
        return _fallback.dot_exact(a, b)
    cdef const int64_t[::1] A = a
    cdef const int64_t[::1] B = b
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t i
    cdef i128 acc = 0
    for i in range(n):
        acc += <i128>A[i] * <i128>B[i]
    return _py(acc)


def matvec_mod(mat_in, v_in):
    mat = np.ascontiguousarray(mat_in, dtype=np.int64)
    v = np.ascontiguousarray(v_in, dtype=np.int64)
    cdef const int64_t[:, ::1] M = mat
    cdef const int64_t[::1] V = v
    cdef Py_ssize_t n = M.shape[0], m = M.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] O = out
    cdef Py_ssize_t i, j
    cdef i128 acc
    cdef int pending
    cdef uint64_t vr
    for i in range(n):
        acc = 0
        pending = 0
        for j in range(m):
            vr = _red64(V[j])
            acc += <i128>_red64(M[i, j]) * <i128>vr
            pending += 1
            if pending == 4:
                acc = <i128>_mod_p(acc)
                pending = 0
        O[i] = <int64_t>_mod_p(acc)
    return out
