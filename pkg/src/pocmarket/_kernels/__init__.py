"""Exact integer kernel selection.

The compiled Cython core is preferred when its extension module is
importable; otherwise the pure-Python fallback is used. Both expose the
same functions with bit-identical results. Set POCMARKET_BACKEND=python
to force the fallback (useful for the equivalence tests and benchmarks),
or POCMARKET_BACKEND=cython to fail loudly when the extension is absent.
"""

import os

_forced = os.environ.get("POCMARKET_BACKEND", "").strip().lower()

if _forced in ("python", "fallback"):
    from pocmarket._kernels import _fallback as _impl
    BACKEND = "python"
elif _forced in ("cython", "compiled", "c"):
    from pocmarket._kernels import _core as _impl  # noqa: F401
    BACKEND = "cython"
else:
    try:
        from pocmarket._kernels import _core as _impl  # type: ignore
        BACKEND = "cython"
    except ImportError:
        from pocmarket._kernels import _fallback as _impl
        BACKEND = "python"

matmul_floor = _impl.matmul_floor
linear_floor = _impl.linear_floor
weighted_sum_floor = _impl.weighted_sum_floor
sum_rows_exact = _impl.sum_rows_exact
gram_exact = _impl.gram_exact
sq_norm_rows = _impl.sq_norm_rows
dot_exact = _impl.dot_exact
matvec_mod = _impl.matvec_mod

__all__ = [
    "BACKEND",
    "matmul_floor",
    "linear_floor",
    "weighted_sum_floor",
    "sum_rows_exact",
    "gram_exact",
    "sq_norm_rows",
    "dot_exact",
    "matvec_mod",
]
