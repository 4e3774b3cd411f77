"""Transcript format, hash challenges, and prove/verify for each claim kind."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from pocmarket import fxp
from pocmarket.errors import VerifyFail
from pocmarket.linalg import Matrix, ModelWeights, weighted_aggregate
from pocmarket.mlcore import Dataset, init_weights, make_blobs
from pocmarket.outlier import DetectorState, RoundSubmissions, detect, krum_average
from pocmarket.verify import (
    HashStream,
    ProofTranscript,
    canonical_json,
    commit,
    derive_challenge,
    prove_accuracy,
    prove_aggregation,
    prove_matmul,
    prove_outlier,
    sha256,
    verify_accuracy,
    verify_aggregation,
    verify_matmul,
    verify_outlier,
)
from tests.conftest import rng_of

GOLDEN = Path(__file__).parent / "golden"


def tampered(t: ProofTranscript, name: str, data: bytes) -> ProofTranscript:
    return ProofTranscript(
        t.kind, tuple((n, data if n == name else d) for n, d in t.sections)
    )


# -- primitives ---------------------------------------------------------------------

def test_canonical_json_is_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'
    assert canonical_json({"a": {"y": 0, "x": 1}}) == b'{"a":{"x":1,"y":0}}'


def test_hash_stream_determinism_and_bounds():
    a = HashStream(b"\x01" * 32, "d")
    b = HashStream(b"\x01" * 32, "d")
    assert a.take(40) == b.take(40)
    assert HashStream(b"\x01" * 32, "other").take(40) != HashStream(
        b"\x01" * 32, "d"
    ).take(40)
    s = HashStream(b"\x02" * 32)
    draws = [s.below(7) for _ in range(300)]
    assert all(0 <= d < 7 for d in draws)
    assert len(set(draws)) == 7
    f = HashStream(b"\x03" * 32)
    assert all(0 <= f.field_elem() < fxp.PRIME for _ in range(50))
    with pytest.raises(ValueError):
        s.below(0)


def test_derive_challenge_shape_and_domain_separation():
    c1 = derive_challenge(b"\x04" * 32, 16, "x")
    c2 = derive_challenge(b"\x04" * 32, 16, "x")
    c3 = derive_challenge(b"\x04" * 32, 16, "y")
    assert c1 == c2 and c1 != c3
    assert len(c1) == 16 and all(0 <= v < fxp.PRIME for v in c1)


def test_commitment_is_sha256():
    c = commit(b"hello", "lbl")
    assert c.digest == hashlib.sha256(b"hello").digest()
    assert c.hex == c.digest.hex()


def test_transcript_serialize_parse_roundtrip():
    t = ProofTranscript("matmul", (("meta", b"{}"), ("a", b"\x00\x01"), ("b", b"")))
    back = ProofTranscript.parse(t.serialize())
    assert back == t


def test_transcript_parse_rejects_garbage():
    t = ProofTranscript("matmul", (("meta", b"{}"),))
    blob = t.serialize()
    with pytest.raises(VerifyFail):
        ProofTranscript.parse(b"XXXX" + blob[4:])
    with pytest.raises(VerifyFail):
        ProofTranscript.parse(blob[:-1])
    with pytest.raises(VerifyFail):
        ProofTranscript.parse(blob + b"\x00")
    with pytest.raises(VerifyFail):
        t.section("nope")


def test_challenge_seed_moves_with_any_section():
    t = ProofTranscript("matmul", (("meta", b"{}"), ("a", b"\x00")))
    seeds = {
        t.challenge_seed(),
        tampered(t, "a", b"\x01").challenge_seed(),
        tampered(t, "meta", b"{} ").challenge_seed(),
        ProofTranscript("accuracy", t.sections).challenge_seed(),
    }
    assert len(seeds) == 4


# -- matmul ---------------------------------------------------------------------------

def mat_pair(seed: int, n=5, k=6, m=4):
    rng = rng_of(70, seed)
    a = Matrix.from_real(rng.normal(size=(n, k)))
    b = Matrix.from_real(rng.normal(size=(k, m)))
    return a, b


def test_matmul_prove_verify_roundtrip():
    a, b = mat_pair(0)
    c, t = prove_matmul(a, b, reps=2)
    assert verify_matmul(t) is True
    assert verify_matmul(
        ProofTranscript.parse(t.serialize()),
        expect_a=sha256(t.section("a")),
        expect_c=sha256(c.serialize()[0:0] + t.section("c")),
    )


def test_matmul_tampered_product_rejected():
    a, b = mat_pair(1)
    _, t = prove_matmul(a, b)
    c = fxp.unpack_i64_mat(t.section("c")).copy()
    c[0, 0] += 1
    with pytest.raises(VerifyFail):
        verify_matmul(tampered(t, "c", fxp.pack_i64_mat(c)))


def test_matmul_tampered_input_rejected():
    a, b = mat_pair(2)
    _, t = prove_matmul(a, b)
    araws = fxp.unpack_i64_mat(t.section("a")).copy()
    araws[2, 3] -= 5
    with pytest.raises(VerifyFail):
        verify_matmul(tampered(t, "a", fxp.pack_i64_mat(araws)))


def test_matmul_remainder_range_enforced():
    a, b = mat_pair(3)
    _, t = prove_matmul(a, b)
    r = fxp.unpack_i64_mat(t.section("r")).copy()
    c = fxp.unpack_i64_mat(t.section("c")).copy()
    # keep the identity true but push the remainder out of range
    c[0, 0] -= 1
    r[0, 0] += fxp.SCALE
    bad = tampered(tampered(t, "r", fxp.pack_i64_mat(r)), "c", fxp.pack_i64_mat(c))
    with pytest.raises(VerifyFail, match="range|remainder"):
        verify_matmul(bad)


def test_matmul_binding_rejects_wrong_digest():
    a, b = mat_pair(4)
    _, t = prove_matmul(a, b)
    with pytest.raises(VerifyFail, match="commitment"):
        verify_matmul(t, expect_a=b"\x00" * 32)


# -- aggregation ------------------------------------------------------------------------

def models_for_agg(seed: int, n=4):
    rng = rng_of(71, seed)
    lay = (("w", (6,)),)
    return [
        (t, ModelWeights(lay, np.rint(rng.normal(0, 2, 6) * fxp.SCALE).astype(np.int64)))
        for t in range(1, n + 1)
    ]


def test_aggregation_prove_verify_roundtrip():
    entries = models_for_agg(0)
    weights = [40, 60, 50, 30]
    agg, t = prove_aggregation(entries, weights, reps=2)
    assert agg == weighted_aggregate([m for _, m in entries], weights)
    got = verify_aggregation(
        t,
        expect_models={tid: sha256(m.serialize()) for tid, m in entries},
        expect_agg=sha256(agg.serialize()),
        expect_weights={tid: w for (tid, _), w in zip(entries, weights)},
    )
    assert got == agg


def test_aggregation_tampered_aggregate_rejected():
    entries = models_for_agg(1)
    agg, t = prove_aggregation(entries, [10, 10, 10, 10])
    bad = ModelWeights(agg.layout, agg.raws + np.array([1, 0, 0, 0, 0, 0]))
    with pytest.raises(VerifyFail, match="projection|range"):
        verify_aggregation(tampered(t, "agg", bad.serialize()))


def test_aggregation_binding_failures():
    entries = models_for_agg(2)
    agg, t = prove_aggregation(entries, [10, 20, 30, 40])
    with pytest.raises(VerifyFail, match="binding"):
        verify_aggregation(t, expect_models={1: b"\x00" * 32})
    with pytest.raises(VerifyFail, match="binding"):
        verify_aggregation(t, expect_weights={1: 10, 2: 20, 3: 30, 4: 999})
    with pytest.raises(VerifyFail, match="commitment"):
        verify_aggregation(t, expect_agg=b"\x00" * 32)


def test_aggregation_predivided_mode():
    entries = models_for_agg(3)
    agg, t = prove_aggregation(entries, [], mode="predivided", total=6)
    got = verify_aggregation(t)
    assert got == agg
    with pytest.raises(VerifyFail, match="malformed"):
        prove_aggregation(entries, [], mode="predivided", total=3)
    with pytest.raises(VerifyFail, match="malformed"):
        prove_aggregation(entries, [], mode="sum")


def test_aggregation_meta_consistency_enforced():
    entries = models_for_agg(4)
    _, t = prove_aggregation(entries, [10, 20, 30, 40])
    meta = t.meta()
    meta["divisor"] = 99
    with pytest.raises(VerifyFail, match="malformed"):
        verify_aggregation(tampered(t, "meta", canonical_json(meta)))


# -- accuracy -----------------------------------------------------------------------------

def acc_fixture(kind: str, seed: int):
    ds = make_blobs(50, 6, 3, rng_of(72, seed), 2.0, 0.8)
    w = init_weights(kind, 6, 3, 8, rng_of(73, seed))
    return w, ds


@pytest.mark.parametrize("kind", ["lr", "mlp"])
def test_accuracy_prove_verify_roundtrip(kind):
    w, ds = acc_fixture(kind, 0)
    count, t = prove_accuracy(w, ds, reps=2)
    got = verify_accuracy(
        ProofTranscript.parse(t.serialize()),
        expect_model=sha256(w.serialize()),
        expect_dataset=sha256(ds.serialize()),
    )
    assert got == count


def test_accuracy_overclaim_rejected():
    w, ds = acc_fixture("lr", 1)
    _, t = prove_accuracy(w, ds)
    meta = t.meta()
    meta["count"] += 1
    with pytest.raises(VerifyFail, match="count"):
        verify_accuracy(tampered(t, "meta", canonical_json(meta)))


def test_accuracy_tampered_logits_rejected():
    w, ds = acc_fixture("lr", 2)
    _, t = prove_accuracy(w, ds)
    logits = fxp.unpack_i64_mat(t.section("logits")).copy()
    logits[0] = logits[0][::-1].copy()
    with pytest.raises(VerifyFail):
        verify_accuracy(tampered(t, "logits", fxp.pack_i64_mat(logits)))


def test_accuracy_relu_violation_rejected():
    w, ds = acc_fixture("mlp", 3)
    _, t = prove_accuracy(w, ds)
    pre = fxp.unpack_i64_mat(t.section("hidden_pre"))
    assert (pre < 0).any()
    with pytest.raises(VerifyFail, match="relu"):
        verify_accuracy(tampered(t, "hidden_post", fxp.pack_i64_mat(pre)))


def test_accuracy_dataset_binding():
    w, ds = acc_fixture("lr", 4)
    _, t = prove_accuracy(w, ds)
    with pytest.raises(VerifyFail, match="commitment"):
        verify_accuracy(t, expect_dataset=b"\x11" * 32)


# -- outlier ----------------------------------------------------------------------------

GAMMA = fxp.FixedPoint.from_real(0.3)
LAY = (("w", (4,)),)


def om(rng, scale=2.0) -> ModelWeights:
    return ModelWeights(LAY, np.rint(rng.normal(0, scale, 4) * fxp.SCALE).astype(np.int64))


def outlier_round1(seed: int):
    rng = rng_of(74, seed)
    entries = {t: om(rng, 0.5) for t in range(1, 6)}
    entries[6] = ModelWeights(LAY, entries[1].raws + np.array([300 * fxp.SCALE, 0, 0, 0]))
    subs = RoundSubmissions(1, entries)
    report = detect(subs, GAMMA, DetectorState())
    ids = tuple(sorted(entries))
    anchor = krum_average([entries[t] for t in ids], max(1, len(ids) // 2), ids)
    t = prove_outlier(subs, GAMMA, frozenset(), report, anchor, reps=2)
    return subs, report, anchor, t


def test_outlier_round1_roundtrip():
    subs, report, anchor, t = outlier_round1(0)
    got = verify_outlier(
        ProofTranscript.parse(t.serialize()),
        expect_models={tid: sha256(m.serialize()) for tid, m in subs.entries.items()},
        expect_round=1,
        expect_gamma_raw=GAMMA.raw,
        expect_prev_removed=frozenset(),
        expect_prev_present=frozenset(),
    )
    assert got == report
    assert 6 in report.removed


def outlier_round2(seed: int, *, prev_removed=frozenset()):
    rng = rng_of(75, seed)
    prev = {t: om(rng, 0.5) for t in range(1, 6)}
    cur = {t: ModelWeights(LAY, m.raws + 7) for t, m in prev.items()}
    cur[3] = ModelWeights(LAY, -prev[3].raws * 40)
    anchor = weighted_aggregate(list(prev.values()), [1] * 5)
    subs = RoundSubmissions(2, cur, prev)
    report = detect(subs, GAMMA, DetectorState(prev_removed, anchor))
    t = prove_outlier(subs, GAMMA, prev_removed, report, anchor, reps=1)
    return subs, prev, report, anchor, t


def test_outlier_round2_roundtrip_with_bindings():
    subs, prev, report, anchor, t = outlier_round2(1)
    got = verify_outlier(
        t,
        expect_models={tid: sha256(m.serialize()) for tid, m in subs.entries.items()},
        expect_prev={tid: sha256(m.serialize()) for tid, m in prev.items()},
        expect_anchor=sha256(anchor.serialize()),
        expect_round=2,
        expect_gamma_raw=GAMMA.raw,
        expect_prev_removed=frozenset(),
        expect_prev_present=frozenset(prev),
    )
    assert got == report
    assert report.cross_round_flagged == (3,)
    assert 3 in report.removed


def test_outlier_skipped_stage_report():
    rng = rng_of(76)
    prev = {t: om(rng, 0.5) for t in range(1, 5)}
    cur = {t: ModelWeights(LAY, m.raws + 3) for t, m in prev.items()}
    subs = RoundSubmissions(2, cur, prev)
    anchor = weighted_aggregate(list(prev.values()), [1] * 4)
    report = detect(subs, GAMMA, DetectorState(frozenset(), anchor))
    assert not report.cross_trainer_ran
    t = prove_outlier(subs, GAMMA, frozenset(), report, None, reps=1)
    got = verify_outlier(t, expect_prev_present=frozenset(prev))
    assert got == report


def test_outlier_tampered_report_rejected():
    subs, prev, report, anchor, t = outlier_round2(2)
    meta = t.meta()
    meta["report"]["removed"] = []
    meta["report"]["kept"] = sorted(subs.entries)
    with pytest.raises(VerifyFail):
        verify_outlier(tampered(t, "meta", canonical_json(meta)))


def test_outlier_tampered_gram_rejected():
    subs, prev, report, anchor, t = outlier_round2(3)
    gram = [list(r) for r in fxp.unpack_i128_mat(t.section("gram"))]
    gram[0][0] += 1
    with pytest.raises(VerifyFail, match="projection|distance"):
        verify_outlier(tampered(t, "gram", fxp.pack_i128_mat(gram)))


def test_outlier_scoring_removed_trainer_rejected():
    # a transcript claiming a cosine score for a prev-removed trainer is invalid
    subs, prev, report, anchor, t = outlier_round2(4)
    meta = t.meta()
    meta["prev_removed"] = [1]
    with pytest.raises(VerifyFail, match="cosine|binding"):
        verify_outlier(tampered(t, "meta", canonical_json(meta)))


def test_outlier_anchor_binding():
    subs, prev, report, anchor, t = outlier_round2(5)
    with pytest.raises(VerifyFail, match="commitment"):
        verify_outlier(t, expect_anchor=b"\x22" * 32)


def test_outlier_wrong_gamma_binding():
    subs, report, anchor, t = outlier_round1(6)
    with pytest.raises(VerifyFail, match="binding"):
        verify_outlier(t, expect_gamma_raw=GAMMA.raw + 1)


# -- golden transcripts --------------------------------------------------------------

def golden_blobs() -> dict[str, bytes]:
    a, b = mat_pair(99)
    _, t_mat = prove_matmul(a, b, reps=2)
    entries = models_for_agg(99)
    _, t_agg = prove_aggregation(entries, [40, 60, 50, 30], reps=2)
    w, ds = acc_fixture("mlp", 99)
    _, t_acc = prove_accuracy(w, ds, reps=2)
    _, _, _, t_out = outlier_round1(99)
    return {
        "matmul.bin": t_mat.serialize(),
        "aggregation.bin": t_agg.serialize(),
        "accuracy.bin": t_acc.serialize(),
        "outlier.bin": t_out.serialize(),
    }


def test_golden_transcripts_are_byte_stable():
    blobs = golden_blobs()
    for name, blob in blobs.items():
        want = (GOLDEN / name).read_bytes()
        assert blob == want, f"{name} drifted from committed bytes"


def test_golden_transcripts_still_verify():
    verify_matmul(ProofTranscript.parse((GOLDEN / "matmul.bin").read_bytes()))
    verify_aggregation(ProofTranscript.parse((GOLDEN / "aggregation.bin").read_bytes()))
    verify_accuracy(ProofTranscript.parse((GOLDEN / "accuracy.bin").read_bytes()))
    verify_outlier(ProofTranscript.parse((GOLDEN / "outlier.bin").read_bytes()))
