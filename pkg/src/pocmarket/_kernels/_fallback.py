"""Pure-Python/numpy implementations of the exact integer kernels.

Every kernel here is bit-for-bit equivalent to the compiled versions in
``_core``: exact integer accumulation (no intermediate rounding), floor
division for the single rescaling step, and arithmetic over the Mersenne
prime 2**61 - 1 for random-projection checks.

The fast paths use int64 numpy ops when a conservative magnitude bound
proves no intermediate can overflow; otherwise the computation falls back
to object-dtype arrays (arbitrary-precision Python ints). Either way the
result is exact or an Overflow is raised -- never a silent wrap.
"""

import numpy as np

from pocmarket.errors import Overflow

PRIME = (1 << 61) - 1
SCALE_BITS = 16
SCALE = 1 << SCALE_BITS
RAW_LIMIT = 1 << 62          # |raw| of any fixed-point result must stay below
_I64_SAFE = 1 << 62          # accumulation bound that keeps int64 ops exact


def _max_abs(arr) -> int:
    if arr.size == 0:
        return 0
    return max(abs(int(arr.max())), abs(int(arr.min())))


def _to_i64(obj_arr, what: str):
    if _max_abs_obj(obj_arr) >= RAW_LIMIT:
        raise Overflow(f"{what} exceeds raw range")
    return np.array(obj_arr.tolist(), dtype=np.int64)


def _max_abs_obj(arr) -> int:
    flat = arr.reshape(-1)
    if flat.size == 0:
        return 0
    return max(abs(int(v)) for v in flat)


def matmul_floor(a, b):
    """Exact product of two raw matrices, rescaled once.

    Returns (c, r) with sum_k a[i,k]*b[k,j] == c[i,j]*SCALE + r[i,j]
    and 0 <= r < SCALE. c floors the exact rational product.
    """
    n, k = a.shape
    k2, m = b.shape
    bound = k * _max_abs(a) * _max_abs(b)
    if bound < _I64_SAFE:
        acc = a @ b
        c = np.floor_divide(acc, SCALE)
        r = acc - c * SCALE
        if _max_abs(c) >= RAW_LIMIT:
            raise Overflow("matmul result exceeds raw range")
        return c, r
    acc = a.astype(object).dot(b.astype(object))
    c = acc // SCALE
    r = acc - c * SCALE
    return _to_i64(c, "matmul result"), np.array(r.tolist(), dtype=np.int64)


def linear_floor(x, w, bias):
    """Affine layer on raw values: floor((x @ w + bias*SCALE) / SCALE).

    Returns (out, r) with the same exact-division contract as matmul_floor.
    """
    n, d = x.shape
    d2, k = w.shape
    bound = d * _max_abs(x) * _max_abs(w) + SCALE * _max_abs(bias)
    if bound < _I64_SAFE:
        acc = x @ w + bias[np.newaxis, :] * SCALE
        out = np.floor_divide(acc, SCALE)
        r = acc - out * SCALE
        if _max_abs(out) >= RAW_LIMIT:
            raise Overflow("affine output exceeds raw range")
        return out, r
    acc = x.astype(object).dot(w.astype(object)) + bias.astype(object) * SCALE
    out = acc // SCALE
    r = acc - out * SCALE
    return _to_i64(out, "affine output"), np.array(r.tolist(), dtype=np.int64)


def weighted_sum_floor(models, weights, divisor):
    """Weighted column sums floor-divided by a positive integer divisor.

    models is (L, n) raw int64, weights (L,) nonnegative int64. Returns
    (agg, r) with sum_i weights[i]*models[i,j] == agg[j]*divisor + r[j],
    0 <= r[j] < divisor.
    """
    divisor = int(divisor)
    if divisor <= 0:
        raise Overflow("divisor must be positive")
    wsum = int(np.abs(weights).sum())
    bound = wsum * _max_abs(models)
    if bound < _I64_SAFE and divisor < _I64_SAFE:
        acc = weights @ models
        agg = np.floor_divide(acc, divisor)
        r = acc - agg * divisor
        if _max_abs(agg) >= RAW_LIMIT:
            raise Overflow("aggregate exceeds raw range")
        return agg, r
    acc = weights.astype(object).dot(models.astype(object))
    agg = acc // divisor
    r = acc - agg * divisor
    return _to_i64(agg, "aggregate"), _to_i64(r, "aggregate remainder")


def sum_rows_exact(models):
    """Exact column sums of an (L, n) raw matrix."""
    bound = models.shape[0] * _max_abs(models)
    if bound < _I64_SAFE:
        return models.sum(axis=0)
    acc = models.astype(object).sum(axis=0)
    return _to_i64(acc, "row sum")


def gram_exact(rows):
    """Exact Gram matrix of the row vectors, as nested Python ints."""
    n = rows.shape[1]
    bound = n * _max_abs(rows) ** 2
    if bound < _I64_SAFE:
        g = rows @ rows.T
        return [[int(v) for v in row] for row in g]
    g = rows.astype(object).dot(rows.astype(object).T)
    return [[int(v) for v in row] for row in g]


def sq_norm_rows(rows):
    """Exact squared L2 norm of each row, as Python ints."""
    n = rows.shape[1]
    bound = n * _max_abs(rows) ** 2
    if bound < _I64_SAFE:
        sq = (rows * rows).sum(axis=1)
        return [int(v) for v in sq]
    acc = (rows.astype(object) * rows.astype(object)).sum(axis=1)
    return [int(v) for v in acc]


def dot_exact(a, b):
    """Exact integer dot product of two raw vectors."""
    bound = a.shape[0] * _max_abs(a) * _max_abs(b)
    if bound < _I64_SAFE:
        return int(a @ b)
    return int(a.astype(object).dot(b.astype(object)))


def matvec_mod(mat, v):
    """(mat mod p) @ (v mod p) mod p over the Mersenne prime field.

    mat is (n, m) int64 (raw values, may be negative); v is (m,) int64
    field elements. Returns (n,) int64 elements in [0, p).
    """
    red = (mat % PRIME).astype(object)
    vv = (v % PRIME).astype(object)
    out = red.dot(vv) % PRIME
    return np.array([int(x) for x in out], dtype=np.int64)
