"""Contribution assessment: leave-one-out deltas and exact Shapley values.

Per round, every honest trainer i is scored on a small random coalition
S containing i (|S| grows like log N): the score is the accuracy of the
aggregate of S minus the accuracy of the aggregate of S without i, on a
held-out evaluation set. Round scores are L1-normalized so each round
carries equal weight, then summed across rounds; negative totals are
clipped to zero when converting to reward shares.

Accuracies are exact integer counts, so every score is a Fraction and
the whole pipeline (scores, normalization, totals, shares) is exact
rational arithmetic that a contract can recompute and compare for
equality. Coalition sampling is driven by a hash stream keyed on a
public seed, which lets the contract re-derive each coalition instead
of trusting the aggregator's claim.

The exact Shapley value over the same coalition game is provided as a
reference oracle; it enumerates all 2^N coalitions and is capped at
N = 12 players.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from math import factorial

from pocmarket.errors import EmptyEval, TooFew, TooManyTrainers
from pocmarket.linalg import ModelWeights, weighted_aggregate
from pocmarket.mlcore import Dataset, accuracy_count
from pocmarket.verify import HashStream


@dataclass(frozen=True)
class RoundModels:
    """One round's honest submissions, ready for scoring."""

    round: int
    models: dict[int, ModelWeights]
    weights: dict[int, int]             # aggregation weights (dataset sizes)
    prev_global: ModelWeights           # aggregate of the empty coalition

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.models))


@dataclass(frozen=True)
class RlooSample:
    """One leave-one-out measurement (exact counts, re-derivable subset)."""

    trainer: int
    rep: int
    subset: tuple[int, ...]
    with_count: int
    without_count: int
    eval_n: int

    @property
    def delta(self) -> Fraction:
        return Fraction(self.with_count - self.without_count, self.eval_n)


def subset_size(n_ids: int) -> int:
    """Coalition size: min(N, max(2, ceil(log2 N)))."""
    if n_ids <= 1:
        return n_ids
    return min(n_ids, max(2, (n_ids - 1).bit_length()))


def sample_subset(
    ids: tuple[int, ...], target: int, size: int, seed: bytes, rep: int
) -> tuple[int, ...]:
    """Uniform coalition of `size` members containing `target`.

    Deterministic given (seed, target, rep): a hash-stream Fisher-Yates
    draw of size-1 peers from the rest, so any party with the public
    seed reproduces the exact coalition.
    """
    others = [t for t in sorted(ids) if t != target]
    stream = HashStream(seed, f"rloo-subset/{target}/{rep}")
    pool = list(others)
    picks = size - 1
    for j in range(picks):
        r = j + stream.below(len(pool) - j)
        pool[j], pool[r] = pool[r], pool[j]
    return tuple(sorted(pool[:picks] + [target]))


def _coalition_aggregate(rm: RoundModels, coalition: tuple[int, ...]) -> ModelWeights:
    if not coalition:
        return rm.prev_global
    members = sorted(coalition)
    return weighted_aggregate(
        [rm.models[t] for t in members], [rm.weights[t] for t in members]
    )


def rloo_round_detail(
    rm: RoundModels, eval_ds: Dataset, seed: bytes, repetitions: int = 1
) -> list[RlooSample]:
    if eval_ds.n == 0:
        raise EmptyEval("evaluation dataset is empty")
    ids = rm.ids
    if not ids:
        raise TooFew("no honest models this round")
    k = subset_size(len(ids))
    samples = []
    for target in ids:
        for rep in range(repetitions):
            subset = sample_subset(ids, target, k, seed, rep)
            without = tuple(t for t in subset if t != target)
            with_cnt, n = accuracy_count(_coalition_aggregate(rm, subset), eval_ds)
            without_cnt, _ = accuracy_count(_coalition_aggregate(rm, without), eval_ds)
            samples.append(
                RlooSample(target, rep, subset, with_cnt, without_cnt, n)
            )
    return samples


def rloo_scores(samples: list[RlooSample]) -> dict[int, Fraction]:
    """Average the per-repetition deltas into one exact score per trainer."""
    sums: dict[int, Fraction] = {}
    counts: dict[int, int] = {}
    for s in samples:
        sums[s.trainer] = sums.get(s.trainer, Fraction(0)) + s.delta
        counts[s.trainer] = counts.get(s.trainer, 0) + 1
    return {t: sums[t] / counts[t] for t in sorted(sums)}


def rloo_round(
    rm: RoundModels, eval_ds: Dataset, seed: bytes, repetitions: int = 1
) -> dict[int, float]:
    """Float view of the round's leave-one-out scores."""
    exact = rloo_scores(rloo_round_detail(rm, eval_ds, seed, repetitions))
    return {t: float(v) for t, v in exact.items()}


@dataclass(frozen=True)
class ContributionVector:
    """Per-round scores, their normalized forms, and run totals (exact)."""

    ids: tuple[int, ...]
    per_round: tuple[dict[int, Fraction], ...]
    normalized: tuple[dict[int, Fraction], ...]
    totals: dict[int, Fraction]

    def clipped(self) -> dict[int, Fraction]:
        return {t: max(Fraction(0), v) for t, v in self.totals.items()}

    def to_json(self) -> dict:
        def enc(d):
            return [[t, str(d[t])] for t in sorted(d)]

        return {
            "ids": list(self.ids),
            "per_round": [enc(d) for d in self.per_round],
            "normalized": [enc(d) for d in self.normalized],
            "totals": enc(self.totals),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContributionVector":
        def dec(pairs):
            return {int(t): Fraction(v) for t, v in pairs}

        return cls(
            ids=tuple(int(t) for t in obj["ids"]),
            per_round=tuple(dec(p) for p in obj["per_round"]),
            normalized=tuple(dec(p) for p in obj["normalized"]),
            totals=dec(obj["totals"]),
        )


def normalize_and_total(per_round: list[dict[int, Fraction]]) -> ContributionVector:
    """L1-normalize each round, then sum per trainer across rounds.

    A round whose scores are all zero contributes zero to everyone.
    """
    ids = sorted({t for rnd in per_round for t in rnd})
    normalized = []
    totals = {t: Fraction(0) for t in ids}
    for rnd in per_round:
        denom = sum(abs(v) for v in rnd.values())
        if denom == 0:
            norm = {t: Fraction(0) for t in rnd}
        else:
            norm = {t: v / denom for t, v in rnd.items()}
        normalized.append(norm)
        for t, v in norm.items():
            totals[t] += v
    return ContributionVector(
        ids=tuple(ids),
        per_round=tuple(dict(r) for r in per_round),
        normalized=tuple(normalized),
        totals=totals,
    )


def reward_shares(cv: ContributionVector) -> dict[int, Fraction]:
    """Clipped totals scaled to sum to one (all zero -> all zero)."""
    clipped = cv.clipped()
    denom = sum(clipped.values())
    if denom == 0:
        return {t: Fraction(0) for t in cv.ids}
    return {t: clipped[t] / denom for t in cv.ids}


def shapley_exact(rm: RoundModels, eval_ds: Dataset) -> dict[int, Fraction]:
    """Exact Shapley values of the coalition accuracy game.

    v(S) = accuracy of the aggregate of S (empty S falls back to the
    previous global model). Enumerates every coalition; N capped at 12.
    """
    if eval_ds.n == 0:
        raise EmptyEval("evaluation dataset is empty")
    ids = rm.ids
    n = len(ids)
    if n == 0:
        raise TooFew("no models to value")
    if n > 12:
        raise TooManyTrainers(f"exact Shapley capped at 12 players, got {n}")
    values: dict[tuple[int, ...], Fraction] = {}
    for size in range(n + 1):
        for coalition in combinations(ids, size):
            cnt, total = accuracy_count(_coalition_aggregate(rm, coalition), eval_ds)
            values[coalition] = Fraction(cnt, total)
    fact_n = factorial(n)
    out: dict[int, Fraction] = {}
    for i in ids:
        rest = tuple(t for t in ids if t != i)
        acc = Fraction(0)
        for size in range(n):
            weight = Fraction(factorial(size) * factorial(n - size - 1), fact_n)
            for coalition in combinations(rest, size):
                with_i = tuple(sorted(coalition + (i,)))
                acc += weight * (values[with_i] - values[coalition])
        out[i] = acc
    return out
