"""Two-stage anomaly screening of round submissions.

Stage one compares each trainer's submission against its own previous
round: a cosine similarity below the threshold flags the round. Stage
two, triggered by any flag (and always in round one, and whenever a
trainer removed last round resubmits), scores every submission by its
L2 distance to a benign anchor and removes the strict outliers above
mu + sigma, where sigma uses the sample (n-1) denominator.

Verifiability shapes the arithmetic: distances are exact integers,
square roots are floor-isqrt witnesses checkable by squaring, the mean
and variance divisions carry remainders, and the cosine comparison is
replayed squared (no square roots at all). The float fields on the
report are decoded views of those integers, never a separate
computation, so detector and verifier cannot disagree.

The anchor is the m-Krum average in round one (no history exists yet)
and the previous round's verified post-removal aggregate afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pocmarket import _kernels, fxp
from pocmarket.errors import MissingPrevious, TooFew
from pocmarket.linalg import ModelWeights, cosine_below, cosine_similarity, stack_raws, weighted_aggregate


@dataclass(frozen=True)
class RoundSubmissions:
    """Models submitted this round, plus last round's for the cosine check."""

    round: int
    entries: dict[int, ModelWeights]
    previous: dict[int, ModelWeights] | None = None


@dataclass(frozen=True)
class DetectorState:
    """What the detector carries between rounds."""

    prev_removed: frozenset[int] = frozenset()
    benign_avg: ModelWeights | None = None


@dataclass(frozen=True)
class CrossTrainerStats:
    """Exact integers behind one cross-trainer screening."""

    ids: tuple[int, ...]
    sq_dists: tuple[int, ...]       # units 2^-32
    dist_raws: tuple[int, ...]      # isqrt witnesses, units 2^-16
    mu_raw: int
    mu_rem: int
    var_num: int                    # sum of squared deviations, units 2^-32
    var_q: int                      # var_num // (n-1)
    var_rem: int
    sigma_raw: int
    boundary_raw: int
    removed: tuple[int, ...]
    kept: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "ids": list(self.ids),
            "sq_dists": list(self.sq_dists),
            "dist_raws": list(self.dist_raws),
            "mu_raw": self.mu_raw,
            "mu_rem": self.mu_rem,
            "var_num": self.var_num,
            "var_q": self.var_q,
            "var_rem": self.var_rem,
            "sigma_raw": self.sigma_raw,
            "boundary_raw": self.boundary_raw,
            "removed": list(self.removed),
            "kept": list(self.kept),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CrossTrainerStats":
        return cls(
            ids=tuple(int(i) for i in obj["ids"]),
            sq_dists=tuple(int(v) for v in obj["sq_dists"]),
            dist_raws=tuple(int(v) for v in obj["dist_raws"]),
            mu_raw=int(obj["mu_raw"]),
            mu_rem=int(obj["mu_rem"]),
            var_num=int(obj["var_num"]),
            var_q=int(obj["var_q"]),
            var_rem=int(obj["var_rem"]),
            sigma_raw=int(obj["sigma_raw"]),
            boundary_raw=int(obj["boundary_raw"]),
            removed=tuple(int(i) for i in obj["removed"]),
            kept=tuple(int(i) for i in obj["kept"]),
        )


@dataclass(frozen=True)
class DetectionReport:
    round: int
    attack_flagged: bool
    cross_round_scores: dict[int, float]
    cross_round_flagged: tuple[int, ...]
    carryover: bool
    cross_trainer_ran: bool
    l2_scores: dict[int, float]
    mu: float | None
    sigma: float | None
    boundary: float | None
    removed: tuple[int, ...]
    kept: tuple[int, ...]
    stats: CrossTrainerStats | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "attack_flagged": self.attack_flagged,
            "cross_round_scores": [[i, self.cross_round_scores[i]]
                                   for i in sorted(self.cross_round_scores)],
            "cross_round_flagged": list(self.cross_round_flagged),
            "carryover": self.carryover,
            "cross_trainer_ran": self.cross_trainer_ran,
            "l2_scores": [[i, self.l2_scores[i]] for i in sorted(self.l2_scores)],
            "mu": self.mu,
            "sigma": self.sigma,
            "boundary": self.boundary,
            "removed": list(self.removed),
            "kept": list(self.kept),
            "stats": self.stats.to_json() if self.stats else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionReport":
        stats = CrossTrainerStats.from_json(obj["stats"]) if obj.get("stats") else None
        return cls(
            round=int(obj["round"]),
            attack_flagged=bool(obj["attack_flagged"]),
            cross_round_scores={int(i): float(v) for i, v in obj["cross_round_scores"]},
            cross_round_flagged=tuple(int(i) for i in obj["cross_round_flagged"]),
            carryover=bool(obj["carryover"]),
            cross_trainer_ran=bool(obj["cross_trainer_ran"]),
            l2_scores={int(i): float(v) for i, v in obj["l2_scores"]},
            mu=obj["mu"],
            sigma=obj["sigma"],
            boundary=obj["boundary"],
            removed=tuple(int(i) for i in obj["removed"]),
            kept=tuple(int(i) for i in obj["kept"]),
            stats=stats,
        )


# -- stage one: cross-round cosine ------------------------------------------------

def cross_round_check(
    subs: RoundSubmissions, gamma: fxp.FixedPoint
) -> tuple[tuple[int, ...], dict[int, float]]:
    """Flag trainers whose submission turned away from their previous one.

    Only trainers present in both rounds are scored; fresh joiners cannot
    trigger this stage. Returns (flagged ids, per-trainer cosine scores).
    """
    if subs.previous is None:
        raise MissingPrevious("round has no predecessor submissions")
    flagged = []
    scores: dict[int, float] = {}
    for tid in sorted(subs.entries):
        prev = subs.previous.get(tid)
        if prev is None:
            continue
        cur = subs.entries[tid]
        scores[tid] = cosine_similarity(cur, prev)
        if cosine_below(cur.raws, prev.raws, gamma.raw):
            flagged.append(tid)
    return tuple(flagged), scores


# -- stage two: cross-trainer three-sigma ------------------------------------------

def krum_select(
    raws: np.ndarray, ids: tuple[int, ...], neighbor_k: int, m: int
) -> tuple[int, ...]:
    """Ids of the m submissions with the smallest Krum scores.

    A submission's score is the sum of its squared distances to its
    neighbor_k nearest peers; ties break toward the smaller trainer id.
    """
    gram = _kernels.gram_exact(raws)
    L = len(ids)
    scores = []
    for i in range(L):
        dists = sorted(
            gram[i][i] - 2 * gram[i][j] + gram[j][j] for j in range(L) if j != i
        )
        scores.append((sum(dists[:neighbor_k]), ids[i]))
    scores.sort()
    return tuple(tid for _, tid in scores[:m])


def krum_average(
    models: list[ModelWeights], m: int, ids: tuple[int, ...] | None = None
) -> ModelWeights:
    """Plain mean of the m most centrally located models."""
    L = len(models)
    if L < 2:
        raise TooFew("krum needs at least two models")
    if not 1 <= m <= L:
        raise TooFew(f"m={m} outside [1, {L}]")
    if ids is None:
        ids = tuple(range(L))
    order = sorted(range(L), key=lambda i: ids[i])
    sorted_ids = tuple(ids[i] for i in order)
    sorted_models = [models[i] for i in order]
    raws = stack_raws(sorted_models)
    neighbor_k = (L + 1) // 2
    selected = krum_select(raws, sorted_ids, neighbor_k, m)
    chosen = [sorted_models[sorted_ids.index(t)] for t in selected]
    return weighted_aggregate(chosen, [1] * len(chosen))


def crosstrainer_stats(
    ids: tuple[int, ...], raws: np.ndarray, anchor_raws: np.ndarray
) -> CrossTrainerStats:
    """Exact mu + sigma screening of distances to the anchor."""
    n = len(ids)
    if n < 3:
        raise TooFew("cross-trainer check needs at least 3 submissions")
    diffs = raws - anchor_raws[np.newaxis, :]
    sq = _kernels.sq_norm_rows(diffs)
    xs = [math.isqrt(d) for d in sq]
    mu, mu_rem = divmod(sum(xs), n)
    var_num = sum((x - mu) * (x - mu) for x in xs)
    var_q, var_rem = divmod(var_num, n - 1)
    sigma = math.isqrt(var_q)
    boundary = mu + sigma
    removed = tuple(t for t, x in zip(ids, xs) if x > boundary)
    kept = tuple(t for t in ids if t not in removed)
    return CrossTrainerStats(
        ids=tuple(ids),
        sq_dists=tuple(sq),
        dist_raws=tuple(xs),
        mu_raw=mu,
        mu_rem=mu_rem,
        var_num=var_num,
        var_q=var_q,
        var_rem=var_rem,
        sigma_raw=sigma,
        boundary_raw=boundary,
        removed=removed,
        kept=kept,
    )


def cross_trainer_check(
    subs: RoundSubmissions, w_avg: ModelWeights | None = None
) -> tuple[CrossTrainerStats, ModelWeights]:
    """Run the three-sigma screening against a benign anchor.

    Round one bootstraps the anchor with the m-Krum average (m = L//2);
    later rounds must supply the previous post-removal aggregate.
    Returns the stats plus the plain mean over the kept models.
    """
    ids = tuple(sorted(subs.entries))
    models = [subs.entries[t] for t in ids]
    if len(ids) < 3:
        raise TooFew("cross-trainer check needs at least 3 submissions")
    if w_avg is None:
        if subs.round != 1:
            raise MissingPrevious("rounds past the first need the running average")
        w_avg = krum_average(models, max(1, len(ids) // 2), ids)
    raws = stack_raws(models)
    stats = crosstrainer_stats(ids, raws, w_avg.raws)
    kept_models = [subs.entries[t] for t in stats.kept]
    new_avg = weighted_aggregate(kept_models, [1] * len(kept_models))
    return stats, new_avg


# -- combined ----------------------------------------------------------------------

def detect(
    subs: RoundSubmissions, gamma: fxp.FixedPoint, state: DetectorState
) -> DetectionReport:
    """One round of screening: cosine stage, then conditional sigma stage.

    Trainers removed last round are not cosine-scored (their previous
    model is not a trusted anchor); resubmitting instead forces the
    cross-trainer stage, which alone decides whether they return.
    """
    ids = tuple(sorted(subs.entries))
    if subs.round == 1:
        flagged: tuple[int, ...] = ()
        scores: dict[int, float] = {}
        carryover = False
        ran = True
        anchor = None
    else:
        scored = subs
        if state.prev_removed and subs.previous:
            trusted = {t: m for t, m in subs.previous.items()
                       if t not in state.prev_removed}
            scored = RoundSubmissions(subs.round, subs.entries, trusted)
        flagged, scores = cross_round_check(scored, gamma)
        carryover = any(t in state.prev_removed for t in ids)
        ran = bool(flagged) or carryover
        anchor = state.benign_avg
        if ran and anchor is None:
            raise MissingPrevious("no benign average carried from previous round")
    if ran:
        stats, _ = cross_trainer_check(subs, anchor)
        l2 = {t: x / fxp.SCALE for t, x in zip(stats.ids, stats.dist_raws)}
        report = DetectionReport(
            round=subs.round,
            attack_flagged=bool(flagged) or bool(stats.removed),
            cross_round_scores=scores,
            cross_round_flagged=flagged,
            carryover=carryover,
            cross_trainer_ran=True,
            l2_scores=l2,
            mu=stats.mu_raw / fxp.SCALE,
            sigma=stats.sigma_raw / fxp.SCALE,
            boundary=stats.boundary_raw / fxp.SCALE,
            removed=stats.removed,
            kept=stats.kept,
            stats=stats,
        )
    else:
        report = DetectionReport(
            round=subs.round,
            attack_flagged=bool(flagged),
            cross_round_scores=scores,
            cross_round_flagged=flagged,
            carryover=carryover,
            cross_trainer_ran=False,
            l2_scores={},
            mu=None,
            sigma=None,
            boundary=None,
            removed=(),
            kept=ids,
            stats=None,
        )
    return report
