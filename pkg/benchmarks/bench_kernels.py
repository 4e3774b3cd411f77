"""Side-by-side timing of the compiled integer kernels and the pure fallback.

Both implementations are imported directly (the package-level selection is
bypassed), checked for bit-identical outputs on every workload, then timed.
The end-to-end row reruns a full detection scenario in a subprocess per
backend via POCMARKET_BACKEND, since the package binds its kernels at import.

    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-e2e]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from pocmarket._kernels import _fallback

try:
    from pocmarket._kernels import _core
except ImportError:
    _core = None

SCALE = _fallback.SCALE
PRIME = _fallback.PRIME


def _workloads(rng):
    x = rng.integers(-3 * SCALE, 3 * SCALE, size=(2000, 20))
    w = rng.integers(-SCALE, SCALE, size=(20, 10))
    bias = rng.integers(-SCALE, SCALE, size=10)
    models = rng.integers(-2 * SCALE, 2 * SCALE, size=(8, 210))
    weights = rng.integers(80, 120, size=8)
    rows = rng.integers(-2 * SCALE, 2 * SCALE, size=(9, 210))
    logits = rng.integers(-40 * SCALE, 40 * SCALE, size=(2000, 10))
    chall = rng.integers(0, PRIME, size=10)
    vec_a = rng.integers(-2 * SCALE, 2 * SCALE, size=210)
    vec_b = rng.integers(-2 * SCALE, 2 * SCALE, size=210)
    return [
        ("matmul_floor 2000x20x10", "matmul_floor", (x, w)),
        ("linear_floor 2000x20x10", "linear_floor", (x, w, bias)),
        ("weighted_sum 8x210", "weighted_sum_floor",
         (models, weights, int(weights.sum()))),
        ("sum_rows 8x210", "sum_rows_exact", (models,)),
        ("gram 9x210", "gram_exact", (rows,)),
        ("sq_norms 9x210", "sq_norm_rows", (rows,)),
        ("dot 210", "dot_exact", (vec_a, vec_b)),
        ("matvec_mod 2000x10", "matvec_mod", (logits, chall)),
    ]


def _equal(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    return a == b


def _best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'workload':<28} {'python':>10} {'cython':>10} {'speedup':>8}")
    for label, name, args in _workloads(rng):
        py_fn = getattr(_fallback, name)
        py = _best_of(py_fn, args, repeat)
        if _core is None:
            print(f"{label:<28} {py * 1e3:>8.2f}ms {'absent':>10} {'':>8}")
            continue
        cy_fn = getattr(_core, name)
        if not _equal(py_fn(*args), cy_fn(*args)):
            raise SystemExit(f"backend mismatch on {name}")
        cy = _best_of(cy_fn, args, repeat)
        print(
            f"{label:<28} {py * 1e3:>8.2f}ms {cy * 1e3:>8.2f}ms "
            f"{py / cy:>7.1f}x"
        )


_E2E_SNIPPET = """
import time
from pocmarket import kernel_backend
from pocmarket.mlcore import AttackSpec
from pocmarket.orchestrator import ScenarioConfig, run

cfg = ScenarioConfig(
    seed=0, trainers=8, rounds=10, model="lr", dim=20, classes=10,
    samples_per_trainer=100, owner_samples=2000, mean_scale=1.0,
    learning_rate=0.3, epochs=1, batch_size=16,
    attacks={t: AttackSpec("byzantine", sigma=1.0) for t in (2, 5, 7)},
)
t0 = time.perf_counter()
run(cfg)
print(f"{kernel_backend} {time.perf_counter() - t0:.3f}")
"""


def _bench_e2e():
    print()
    print("full detection scenario (8 trainers, 10 rounds):")
    for backend in ("python", "cython"):
        if backend == "cython" and _core is None:
            print("  cython: extension not built")
            continue
        env = dict(os.environ, POCMARKET_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, "-c", _E2E_SNIPPET],
            capture_output=True, text=True, env=env, check=True,
        ).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]):.2f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5,
                    help="timing repetitions per workload (min is reported)")
    ap.add_argument("--skip-e2e", action="store_true",
                    help="only time the kernels, not the full scenario")
    args = ap.parse_args()
    if _core is None:
        print("note: compiled extension unavailable, timing fallback only")
    _bench_kernels(args.repeat)
    if not args.skip_e2e:
        _bench_e2e()


if __name__ == "__main__":
    main()
