"""Two-stage anomaly screening: cosine stage, Krum anchor, sigma boundary."""

import math

import numpy as np
import pytest

from pocmarket import fxp
from pocmarket.errors import MissingPrevious, TooFew
from pocmarket.linalg import ModelWeights, weighted_aggregate
from pocmarket.outlier import (
    DetectionReport,
    DetectorState,
    RoundSubmissions,
    cross_round_check,
    cross_trainer_check,
    crosstrainer_stats,
    detect,
    krum_average,
)
from tests.conftest import rng_of

S = fxp.SCALE
LAY = (("w", (4,)),)
GAMMA = fxp.FixedPoint.from_real(0.3)


def model(*raws) -> ModelWeights:
    return ModelWeights(LAY, np.array(raws, dtype=np.int64))


def rand_model(rng, scale=2.0) -> ModelWeights:
    return ModelWeights(LAY, np.rint(rng.normal(0, scale, 4) * S).astype(np.int64))


# -- cross-trainer statistics -----------------------------------------------------

def test_sigma_screening_known_scores():
    # distances to the anchor come out as 1, 1, 1, 1, 9 model-units
    ids = (1, 2, 3, 4, 5)
    raws = np.array([[S], [S], [S], [S], [9 * S]], dtype=np.int64)
    anchor = np.zeros(1, dtype=np.int64)
    st = crosstrainer_stats(ids, raws, anchor)
    xs = list(st.dist_raws)
    assert xs == [S, S, S, S, 9 * S]
    assert st.mu_raw * 5 + st.mu_rem == sum(xs) and 0 <= st.mu_rem < 5
    assert st.var_num == sum((x - st.mu_raw) ** 2 for x in xs)
    assert st.var_q * 4 + st.var_rem == st.var_num and 0 <= st.var_rem < 4
    assert st.sigma_raw == math.isqrt(st.var_q)
    assert st.boundary_raw == st.mu_raw + st.sigma_raw
    assert st.mu_raw / S == pytest.approx(2.6, abs=1e-4)
    assert st.boundary_raw / S == pytest.approx(6.177, abs=1e-2)
    assert st.removed == (5,)
    assert st.kept == (1, 2, 3, 4)


def test_sqrt_witnesses_bracket_squared_distances():
    rng = rng_of(40)
    raws = np.rint(rng.normal(0, 3, (5, 6)) * S).astype(np.int64)
    anchor = np.rint(rng.normal(0, 3, 6) * S).astype(np.int64)
    st = crosstrainer_stats((1, 2, 3, 4, 5), raws, anchor)
    for sq, x in zip(st.sq_dists, st.dist_raws):
        assert x * x <= sq < (x + 1) * (x + 1)


def test_identical_submissions_remove_nobody():
    m = model(3 * S, -S, 0, 7)
    subs = RoundSubmissions(1, {t: m for t in (1, 2, 3, 4)})
    st, avg = cross_trainer_check(subs)
    assert st.removed == ()
    assert st.sigma_raw == 0
    assert avg == m


def test_one_far_model_among_seven():
    rng = rng_of(41)
    entries = {t: rand_model(rng, 0.05) for t in range(1, 8)}
    base = entries[1]
    entries[8] = ModelWeights(LAY, base.raws + np.array([100 * S, 0, 0, 0]))
    st, _ = cross_trainer_check(RoundSubmissions(1, entries))
    assert st.removed == (8,)


@pytest.mark.parametrize("c", [2, 3, 10, 1000])
def test_monotone_safety_farther_outlier_stays_removed(c):
    # four members at distance b, the outlier at c*b; removal must hold for all c > 1
    ids = (1, 2, 3, 4, 9)
    raws = np.array([[S], [S], [S], [S], [c * S]], dtype=np.int64)
    st = crosstrainer_stats(ids, raws, np.zeros(1, dtype=np.int64))
    assert st.removed == (9,)


def test_too_few_submissions():
    with pytest.raises(TooFew):
        crosstrainer_stats((1, 2), np.zeros((2, 1), dtype=np.int64),
                           np.zeros(1, dtype=np.int64))


# -- krum --------------------------------------------------------------------------

def krum_oracle(models, m, ids):
    """Exhaustive scoring with plain integer loops."""
    L = len(ids)
    order = sorted(range(L), key=lambda i: ids[i])
    ms = [models[i] for i in order]
    sids = [ids[i] for i in order]
    k = (L + 1) // 2
    scored = []
    for i in range(L):
        ds = sorted(
            int(np.sum((ms[i].raws - ms[j].raws).astype(object) ** 2))
            for j in range(L) if j != i
        )
        scored.append((sum(ds[:k]), sids[i]))
    scored.sort()
    chosen = [t for _, t in scored[:m]]
    return weighted_aggregate([ms[sids.index(t)] for t in chosen], [1] * m), set(chosen)


def test_krum_excludes_far_outliers():
    rng = rng_of(42)
    cluster = [rand_model(rng, 0.1) for _ in range(5)]
    outliers = [
        model(1000 * S, 0, 0, 0),
        model(0, -2000 * S, 0, 0),
        model(0, 0, 1500 * S, 1500 * S),
    ]
    models = cluster + outliers
    ids = tuple(range(1, 9))
    got = krum_average(models, 4, ids)
    want, chosen = krum_oracle(models, 4, ids)
    assert chosen <= {1, 2, 3, 4, 5}
    assert got == want


def test_krum_identical_models_returns_that_model():
    m = model(5, 6, 7, 8)
    assert krum_average([m, m, m], 2) == m


def test_krum_two_models_tie_breaks_on_smaller_id():
    a, b = model(0, 0, 0, 0), model(S, 0, 0, 0)
    assert krum_average([a, b], 1) == a
    # tie-break follows ids, not list positions
    assert krum_average([a, b], 1, ids=(5, 2)) == b


def test_krum_permutation_invariance():
    rng = rng_of(43)
    models = [rand_model(rng) for _ in range(6)]
    ids = (3, 1, 4, 6, 2, 5)
    base = krum_average(models, 3, ids)
    perm = [4, 0, 5, 2, 1, 3]
    assert krum_average([models[i] for i in perm],
                        3, tuple(ids[i] for i in perm)) == base


def test_krum_guards():
    with pytest.raises(TooFew):
        krum_average([model(1, 2, 3, 4)], 1)
    with pytest.raises(TooFew):
        krum_average([model(1, 2, 3, 4), model(4, 3, 2, 1)], 3)


# -- cross-round cosine -------------------------------------------------------------

def test_resubmission_scores_one_and_passes():
    m = model(S, 2 * S, -S, 0)
    subs = RoundSubmissions(2, {1: m}, {1: m})
    flagged, scores = cross_round_check(subs, GAMMA)
    assert flagged == ()
    assert scores[1] == pytest.approx(1.0)


def test_negated_model_is_flagged():
    m = model(S, 2 * S, -S, 0)
    neg = ModelWeights(LAY, -m.raws)
    flagged, scores = cross_round_check(RoundSubmissions(2, {1: neg}, {1: m}), GAMMA)
    assert flagged == (1,)
    assert scores[1] == pytest.approx(-1.0)


def test_fresh_joiner_is_not_scored():
    m = model(S, 0, 0, 0)
    flagged, scores = cross_round_check(
        RoundSubmissions(2, {1: m, 2: m}, {1: m}), GAMMA
    )
    assert flagged == ()
    assert set(scores) == {1}


def test_first_round_has_no_predecessor():
    with pytest.raises(MissingPrevious):
        cross_round_check(RoundSubmissions(1, {1: model(S, 0, 0, 0)}), GAMMA)


# -- combined detect ----------------------------------------------------------------

def benign_entries(rng, n=5):
    base = rand_model(rng)
    return {
        t: ModelWeights(LAY, base.raws + np.rint(rng.normal(0, 0.01, 4) * S).astype(np.int64))
        for t in range(1, n + 1)
    }


def test_round_one_always_runs_sigma_stage():
    rng = rng_of(44)
    rep = detect(RoundSubmissions(1, benign_entries(rng)), GAMMA, DetectorState())
    assert rep.cross_trainer_ran
    assert rep.cross_round_scores == {}
    assert rep.stats is not None
    assert set(rep.removed) | set(rep.kept) == {1, 2, 3, 4, 5}


def test_quiet_round_skips_sigma_stage():
    rng = rng_of(45)
    prev = benign_entries(rng)
    cur = {t: ModelWeights(LAY, m.raws + 3) for t, m in prev.items()}
    rep = detect(RoundSubmissions(2, cur, prev), GAMMA,
                 DetectorState(benign_avg=weighted_aggregate(list(prev.values()), [1] * 5)))
    assert not rep.cross_trainer_ran
    assert rep.removed == ()
    assert rep.kept == (1, 2, 3, 4, 5)
    assert rep.mu is None and rep.sigma is None and rep.boundary is None
    assert not rep.attack_flagged


def test_cosine_flag_triggers_sigma_stage_and_removal():
    rng = rng_of(46)
    prev = benign_entries(rng)
    cur = dict(prev)
    cur[3] = ModelWeights(LAY, -prev[3].raws * 50)
    anchor = weighted_aggregate(list(prev.values()), [1] * 5)
    rep = detect(RoundSubmissions(2, cur, prev), GAMMA,
                 DetectorState(benign_avg=anchor))
    assert rep.cross_round_flagged == (3,)
    assert rep.cross_trainer_ran
    assert rep.attack_flagged
    assert 3 in rep.removed


def test_carryover_forces_sigma_stage():
    rng = rng_of(47)
    prev = benign_entries(rng)
    cur = {t: ModelWeights(LAY, m.raws + 3) for t, m in prev.items()}
    anchor = weighted_aggregate(list(prev.values()), [1] * 5)
    rep = detect(RoundSubmissions(2, cur, prev), GAMMA,
                 DetectorState(prev_removed=frozenset({2}), benign_avg=anchor))
    assert rep.carryover
    assert rep.cross_trainer_ran


def test_removed_last_round_is_not_cosine_scored():
    rng = rng_of(48)
    prev = benign_entries(rng)
    cur = dict(prev)
    # trainer 2 was removed last round; its garbage cosine must not count
    cur[2] = ModelWeights(LAY, -prev[2].raws * 50)
    anchor = weighted_aggregate([prev[t] for t in (1, 3, 4, 5)], [1] * 4)
    rep = detect(RoundSubmissions(2, cur, prev), GAMMA,
                 DetectorState(prev_removed=frozenset({2}), benign_avg=anchor))
    assert 2 not in rep.cross_round_scores
    assert rep.cross_round_flagged == ()
    assert rep.carryover and rep.cross_trainer_ran
    assert 2 in rep.removed


def test_sigma_stage_without_anchor_fails():
    rng = rng_of(49)
    prev = benign_entries(rng)
    cur = dict(prev)
    cur[3] = ModelWeights(LAY, -prev[3].raws * 50)
    with pytest.raises(MissingPrevious):
        detect(RoundSubmissions(2, cur, prev), GAMMA, DetectorState())


def test_report_json_roundtrip():
    rng = rng_of(50)
    rep = detect(RoundSubmissions(1, benign_entries(rng)), GAMMA, DetectorState())
    assert DetectionReport.from_json(rep.to_json()) == rep
    quiet = detect(
        RoundSubmissions(2, benign_entries(rng_of(51)), benign_entries(rng_of(51))),
        GAMMA, DetectorState(benign_avg=rand_model(rng)),
    )
    assert DetectionReport.from_json(quiet.to_json()) == quiet
