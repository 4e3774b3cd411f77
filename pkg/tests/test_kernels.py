"""The compiled core and the pure-Python fallback must agree bit for bit."""

import numpy as np
import pytest

from pocmarket import _kernels
from pocmarket._kernels import _fallback

try:
    from pocmarket._kernels import _core
except ImportError:
    _core = None

HAVE_CORE = _core is not None


def _rand_i64(rng, shape, hi=1 << 40):
    return rng.integers(-hi, hi, size=shape, dtype=np.int64)


def test_backend_reported():
    assert _kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_dot_exact_matches():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = _rand_i64(rng, 257)
        b = _rand_i64(rng, 257)
        assert _core.dot_exact(a, b) == _fallback.dot_exact(a, b)
        assert _fallback.dot_exact(a, b) == sum(int(x) * int(y) for x, y in zip(a, b))


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_dot_exact_huge_values_do_not_wrap():
    # products near 2^80 force the big-int path in both backends
    a = np.full(64, (1 << 40) - 3, dtype=np.int64)
    b = np.full(64, -((1 << 40) - 7), dtype=np.int64)
    want = 64 * ((1 << 40) - 3) * -((1 << 40) - 7)
    assert _core.dot_exact(a, b) == want
    assert _fallback.dot_exact(a, b) == want


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_gram_and_norms_match():
    rng = np.random.default_rng(1)
    rows = _rand_i64(rng, (5, 83))
    assert _core.gram_exact(rows) == _fallback.gram_exact(rows)
    assert _core.sq_norm_rows(rows) == _fallback.sq_norm_rows(rows)


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_aggregation_kernels_match():
    rng = np.random.default_rng(2)
    models = _rand_i64(rng, (4, 101))
    weights = np.array([3, 1, 5, 2], dtype=np.int64)
    s_core = _core.sum_rows_exact(models)
    s_fall = _fallback.sum_rows_exact(models)
    assert list(s_core) == list(s_fall)
    w_core = _core.weighted_sum_floor(models, weights, 11)
    w_fall = _fallback.weighted_sum_floor(models, weights, 11)
    assert np.array_equal(np.asarray(w_core[0]), np.asarray(w_fall[0]))
    assert list(w_core[1]) == list(w_fall[1])


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_matmul_floor_matches():
    rng = np.random.default_rng(3)
    a = _rand_i64(rng, (7, 9), hi=1 << 30)
    b = _rand_i64(rng, (9, 5), hi=1 << 30)
    qc, rc = _core.matmul_floor(a, b)
    qf, rf = _fallback.matmul_floor(a, b)
    assert np.array_equal(np.asarray(qc), np.asarray(qf))
    assert np.array_equal(np.asarray(rc), np.asarray(rf))


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_linear_floor_matches():
    rng = np.random.default_rng(4)
    x = _rand_i64(rng, (13, 6), hi=1 << 30)
    w = _rand_i64(rng, (6, 4), hi=1 << 30)
    bias = _rand_i64(rng, 4, hi=1 << 30)
    qc, rc = _core.linear_floor(x, w, bias)
    qf, rf = _fallback.linear_floor(x, w, bias)
    assert np.array_equal(np.asarray(qc), np.asarray(qf))
    assert np.array_equal(np.asarray(rc), np.asarray(rf))


@pytest.mark.skipif(not HAVE_CORE, reason="compiled core not built")
def test_matvec_mod_matches():
    rng = np.random.default_rng(5)
    mat = rng.integers(-(1 << 45), 1 << 45, size=(6, 8), dtype=np.int64)
    v = rng.integers(0, (1 << 61) - 1, size=8, dtype=np.int64)
    assert list(_core.matvec_mod(mat, v)) == list(_fallback.matvec_mod(mat, v))


def test_floor_semantics_on_negatives():
    # floor division, not truncation: -7 // 2 == -4
    models = np.array([[-7], [0]], dtype=np.int64)
    weights = np.array([1, 1], dtype=np.int64)
    q, r = _fallback.weighted_sum_floor(models, weights, 2)
    assert int(np.asarray(q)[0]) == -4
    assert int(np.asarray(r)[0]) == 1
