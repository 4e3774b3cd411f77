"""Commit-and-check transcripts for every protocol computation.

A transcript is an ordered list of named byte sections (inputs, claimed
outputs, witnesses) plus a canonical-JSON meta section. Commitments are
SHA-256 digests of the section bytes; the Fiat-Shamir challenge seed is
the hash of all section digests in order, so challenges are fixed the
moment the transcript is fixed and any tampering with any section's
bytes moves every challenge. Transcript bytes alone determine the
verdict; a contract additionally pins section digests to the content
ids it already holds.

Soundness of the modular spot checks: all committed values are range
checked so that both sides of each claimed integer identity stay below
p/2 in magnitude. Two integers that agree modulo p = 2**61 - 1 and both
lie in (-p/2, p/2) are equal, so a mod-p random projection certifies
the integer identity itself, not just its residue. The projections are
Freivalds checks: one random vector catches a false matrix identity
with probability at least 1 - 1/p per repetition.

What this is NOT: zero knowledge. Sections are opened in full; the only
goal is that a deterministic verifier (the simulated contract) can
cheaply confirm the aggregator's arithmetic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from pocmarket import _kernels, fxp
from pocmarket.errors import VerifyFail
from pocmarket.linalg import Matrix, ModelWeights, cosine_below, stack_raws
from pocmarket.mlcore import Dataset, forward_fixed
from pocmarket.outlier import DetectionReport

TRANSCRIPT_MAGIC = b"POCT"
TRANSCRIPT_VERSION = 1

KIND_MATMUL = "matmul"
KIND_AGGREGATION = "aggregation"
KIND_OUTLIER = "outlier"
KIND_ACCURACY = "accuracy"

_HALF_PRIME = fxp.PRIME // 2


def canonical_json(obj) -> bytes:
    """Deterministic JSON bytes: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Commitment:
    label: str
    digest: bytes

    @property
    def hex(self) -> str:
        return self.digest.hex()


def commit(data: bytes, label: str = "") -> Commitment:
    return Commitment(label, sha256(data))


class HashStream:
    """Deterministic byte stream: SHA-256 of (seed, domain, counter).

    Supplies unbiased integers below a bound by rejection sampling and
    canonical field elements via a 61-bit mask (accept < p).
    """

    def __init__(self, seed: bytes, domain: str = ""):
        self._prefix = seed + domain.encode("utf-8")
        self._counter = 0
        self._buf = b""

    def _refill(self):
        block = hashlib.sha256(
            self._prefix + struct.pack("<Q", self._counter)
        ).digest()
        self._counter += 1
        self._buf += block

    def take(self, n: int) -> bytes:
        while len(self._buf) < n:
            self._refill()
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def below(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            v = self.u64()
            if v < limit:
                return v % bound

    def field_elem(self) -> int:
        mask = (1 << 61) - 1
        while True:
            v = self.u64() & mask
            if v < fxp.PRIME:
                return v


def derive_challenge(seed: bytes, n: int, domain: str = "") -> list[int]:
    """n field elements, deterministic in (seed, domain)."""
    stream = HashStream(seed, "challenge/" + domain)
    return [stream.field_elem() for _ in range(n)]


@dataclass(frozen=True)
class ProofTranscript:
    """Ordered named sections; kind selects the verification procedure."""

    kind: str
    sections: tuple[tuple[str, bytes], ...]

    def section(self, name: str) -> bytes:
        for n, data in self.sections:
            if n == name:
                return data
        raise VerifyFail("malformed", f"missing section {name!r}")

    def has_section(self, name: str) -> bool:
        return any(n == name for n, _ in self.sections)

    def meta(self) -> dict:
        try:
            obj = json.loads(self.section("meta"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise VerifyFail("malformed", f"bad meta json: {exc}") from exc
        if not isinstance(obj, dict):
            raise VerifyFail("malformed", "meta is not an object")
        return obj

    def commitments(self) -> list[Commitment]:
        return [Commitment(name, sha256(data)) for name, data in self.sections]

    def challenge_seed(self) -> bytes:
        h = hashlib.sha256()
        h.update(b"pocmarket/transcript/v1")
        h.update(self.kind.encode("utf-8"))
        for name, data in self.sections:
            h.update(sha256(name.encode("utf-8")))
            h.update(sha256(data))
        return h.digest()

    def serialize(self) -> bytes:
        kind_b = self.kind.encode("utf-8")
        out = [
            TRANSCRIPT_MAGIC,
            struct.pack("<HB", TRANSCRIPT_VERSION, len(kind_b)),
            kind_b,
            struct.pack("<I", len(self.sections)),
        ]
        for name, data in self.sections:
            nb = name.encode("utf-8")
            out.append(struct.pack("<H", len(nb)))
            out.append(nb)
            out.append(struct.pack("<I", len(data)))
            out.append(data)
        return b"".join(out)

    @classmethod
    def parse(cls, blob: bytes) -> "ProofTranscript":
        try:
            if blob[:4] != TRANSCRIPT_MAGIC:
                raise VerifyFail("malformed", "bad magic")
            version, kind_len = struct.unpack_from("<HB", blob, 4)
            if version != TRANSCRIPT_VERSION:
                raise VerifyFail("malformed", f"unknown version {version}")
            off = 7
            kind = blob[off:off + kind_len].decode("utf-8")
            off += kind_len
            (n_sections,) = struct.unpack_from("<I", blob, off)
            off += 4
            sections = []
            for _ in range(n_sections):
                (nlen,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                (dlen,) = struct.unpack_from("<I", blob, off)
                off += 4
                if off + dlen > len(blob):
                    raise VerifyFail("malformed", "section overruns blob")
                sections.append((name, blob[off:off + dlen]))
                off += dlen
            if off != len(blob):
                raise VerifyFail("malformed", "trailing bytes")
            return cls(kind, tuple(sections))
        except (struct.error, UnicodeDecodeError) as exc:
            raise VerifyFail("malformed", str(exc)) from exc


def _expect_digest(t: ProofTranscript, name: str, expected: bytes | None):
    if expected is None:
        return
    if sha256(t.section(name)) != expected:
        raise VerifyFail("commitment", f"section {name!r} does not match binding")


def _mod_dot(values, challenge) -> int:
    acc = 0
    for a, v in zip(values, challenge):
        acc += (int(a) % fxp.PRIME) * int(v)
    return acc % fxp.PRIME


def _max_abs(arr) -> int:
    if arr.size == 0:
        return 0
    return max(abs(int(arr.max())), abs(int(arr.min())))


def _reps(meta: dict) -> int:
    reps = int(meta.get("reps", 1))
    if not 1 <= reps <= 64:
        raise VerifyFail("malformed", "repetition count out of range")
    return reps


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def prove_matmul(a: Matrix, b: Matrix, reps: int = 1):
    """Fixed-point product with a replayable exactness certificate."""
    c, rem = _kernels.matmul_floor(a.raws, b.raws)
    n, k = a.shape
    m = b.shape[1]
    meta = {"n": n, "k": k, "m": m, "reps": reps}
    t = ProofTranscript(
        KIND_MATMUL,
        (
            ("meta", canonical_json(meta)),
            ("a", fxp.pack_i64_mat(a.raws)),
            ("b", fxp.pack_i64_mat(b.raws)),
            ("c", fxp.pack_i64_mat(c)),
            ("r", fxp.pack_i64_mat(rem)),
        ),
    )
    return Matrix(c), t


def verify_matmul(
    t: ProofTranscript,
    expect_a: bytes | None = None,
    expect_b: bytes | None = None,
    expect_c: bytes | None = None,
) -> bool:
    if t.kind != KIND_MATMUL:
        raise VerifyFail("malformed", f"kind {t.kind!r} is not matmul")
    meta = t.meta()
    reps = _reps(meta)
    try:
        a = fxp.unpack_i64_mat(t.section("a"))
        b = fxp.unpack_i64_mat(t.section("b"))
        c = fxp.unpack_i64_mat(t.section("c"))
        r = fxp.unpack_i64_mat(t.section("r"))
    except Exception as exc:
        raise VerifyFail("malformed", str(exc)) from exc
    n, k, m = int(meta["n"]), int(meta["k"]), int(meta["m"])
    if a.shape != (n, k) or b.shape != (k, m) or c.shape != (n, m) or r.shape != (n, m):
        raise VerifyFail("malformed", "shape mismatch with meta")
    _expect_digest(t, "a", expect_a)
    _expect_digest(t, "b", expect_b)
    _expect_digest(t, "c", expect_c)
    if r.size and (int(r.min()) < 0 or int(r.max()) >= fxp.SCALE):
        raise VerifyFail("range", "matmul remainder outside [0, 2^16)")
    lhs_bound = k * _max_abs(a) * _max_abs(b)
    rhs_bound = fxp.SCALE * _max_abs(c) + fxp.SCALE
    if lhs_bound >= _HALF_PRIME or rhs_bound >= _HALF_PRIME:
        raise VerifyFail("range", "matmul operands exceed field headroom")
    seed = t.challenge_seed()
    chall = derive_challenge(seed, m * reps, "matmul")
    for rep in range(reps):
        v = np.asarray(chall[rep * m:(rep + 1) * m], dtype=np.int64)
        bv = _kernels.matvec_mod(b, v)
        lhs = _kernels.matvec_mod(a, bv)
        cv = _kernels.matvec_mod(c, v)
        rv = _kernels.matvec_mod(r, v)
        for i in range(n):
            rhs = ((int(cv[i]) << fxp.FRACTION_BITS) + int(rv[i])) % fxp.PRIME
            if int(lhs[i]) != rhs:
                raise VerifyFail("projection", f"matmul row {i} fails Freivalds check")
    return True


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def prove_aggregation(
    entries: list[tuple[int, ModelWeights]],
    weights: list[int],
    mode: str = "weighted",
    total: int | None = None,
    reps: int = 1,
):
    """Aggregate models and emit the witnessed transcript.

    "weighted": agg = floor(sum_i w_i m_i / sum_i w_i), integer weights.
    "predivided": members already submitted m_i = w_i / total; the
    aggregate is floor(total * sum_i m_i / len(entries)), which collapses
    to the plain exact sum when every registered trainer is present.
    """
    if mode not in ("weighted", "predivided"):
        raise VerifyFail("malformed", f"unknown aggregation mode {mode!r}")
    entries = sorted(entries, key=lambda kv: kv[0])
    ids = [tid for tid, _ in entries]
    models = [m for _, m in entries]
    stacked = stack_raws(models)
    if mode == "weighted":
        w = [int(x) for x in weights]
        divisor = sum(w)
    else:
        if total is None or total < len(entries):
            raise VerifyFail("malformed", "predivided mode needs total >= members")
        w = [int(total)] * len(entries)
        divisor = len(entries)
    if any(x < 0 for x in w) or divisor <= 0:
        raise VerifyFail("malformed", "aggregation weights must be nonnegative")
    agg, rem = _kernels.weighted_sum_floor(
        stacked, np.asarray(w, dtype=np.int64), divisor
    )
    agg_model = ModelWeights(models[0].layout, agg)
    meta = {
        "mode": mode,
        "ids": ids,
        "weights": w,
        "divisor": divisor,
        "total": total,
        "reps": reps,
    }
    sections = [("meta", canonical_json(meta))]
    for tid, model in entries:
        sections.append((f"model:{tid}", model.serialize()))
    sections.append(("agg", agg_model.serialize()))
    sections.append(("rem", fxp.pack_i64_vec(rem)))
    return agg_model, ProofTranscript(KIND_AGGREGATION, tuple(sections))


def verify_aggregation(
    t: ProofTranscript,
    expect_models: dict[int, bytes] | None = None,
    expect_agg: bytes | None = None,
    expect_weights: dict[int, int] | None = None,
) -> ModelWeights:
    """Check the witnessed mean identity; returns the verified aggregate."""
    if t.kind != KIND_AGGREGATION:
        raise VerifyFail("malformed", f"kind {t.kind!r} is not aggregation")
    meta = t.meta()
    reps = _reps(meta)
    mode = meta.get("mode")
    if mode not in ("weighted", "predivided"):
        raise VerifyFail("malformed", f"unknown aggregation mode {mode!r}")
    ids = [int(x) for x in meta["ids"]]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise VerifyFail("malformed", "ids must be strictly increasing")
    w = [int(x) for x in meta["weights"]]
    divisor = int(meta["divisor"])
    if len(w) != len(ids) or any(x < 0 for x in w) or divisor <= 0:
        raise VerifyFail("malformed", "bad weights or divisor")
    if mode == "weighted":
        if divisor != sum(w):
            raise VerifyFail("malformed", "divisor must equal the weight sum")
    else:
        total = int(meta["total"])
        if divisor != len(ids) or any(x != total for x in w) or total < len(ids):
            raise VerifyFail("malformed", "predivided meta inconsistent")
    try:
        models = [ModelWeights.deserialize(t.section(f"model:{tid}")) for tid in ids]
        agg = ModelWeights.deserialize(t.section("agg"))
        rem = fxp.unpack_i64_vec(t.section("rem"))
    except VerifyFail:
        raise
    except Exception as exc:
        raise VerifyFail("malformed", str(exc)) from exc
    layout = models[0].layout
    if any(m.layout != layout for m in models) or agg.layout != layout:
        raise VerifyFail("malformed", "layout mismatch inside transcript")
    n = agg.n_params
    if rem.shape != (n,):
        raise VerifyFail("malformed", "remainder length mismatch")
    if expect_models is not None:
        if set(expect_models) != set(ids):
            raise VerifyFail("binding", "member set does not match expectation")
        for tid in ids:
            _expect_digest(t, f"model:{tid}", expect_models[tid])
    if expect_weights is not None:
        for tid, weight in zip(ids, w):
            if expect_weights.get(tid) != weight:
                raise VerifyFail("binding", f"weight for trainer {tid} mismatches")
    _expect_digest(t, "agg", expect_agg)
    if rem.size and (int(rem.min()) < 0 or int(rem.max()) >= divisor):
        raise VerifyFail("range", "aggregation remainder outside [0, divisor)")
    stacked = stack_raws(models)
    lhs_bound = sum(w) * _max_abs(stacked)
    rhs_bound = divisor * _max_abs(agg.raws) + divisor
    if lhs_bound >= _HALF_PRIME or rhs_bound >= _HALF_PRIME:
        raise VerifyFail("range", "aggregation operands exceed field headroom")
    seed = t.challenge_seed()
    chall = derive_challenge(seed, n * reps, "aggregation")
    for rep in range(reps):
        v = np.asarray(chall[rep * n:(rep + 1) * n], dtype=np.int64)
        mv = _kernels.matvec_mod(stacked, v)
        lhs = sum((wi % fxp.PRIME) * int(mvi) for wi, mvi in zip(w, mv)) % fxp.PRIME
        aggv = _mod_dot(agg.raws, v)
        remv = _mod_dot(rem, v)
        rhs = ((divisor % fxp.PRIME) * aggv + remv) % fxp.PRIME
        if lhs != rhs:
            raise VerifyFail("projection", "aggregation identity fails Freivalds check")
    return agg


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def prove_accuracy(w: ModelWeights, ds: Dataset, reps: int = 1):
    """Exact accuracy claim with the full fixed-point forward trace."""
    trace = forward_fixed(w, ds.features_raw)
    logits = trace["logits"]
    pred = np.argmax(logits, axis=1)
    count = int((pred == ds.labels).sum())
    is_mlp = "hidden_pre" in trace
    meta = {
        "model_kind": "mlp" if is_mlp else "lr",
        "n": ds.n,
        "d": ds.dim,
        "classes": ds.num_classes,
        "count": count,
        "reps": reps,
    }
    sections = [
        ("meta", canonical_json(meta)),
        ("model", w.serialize()),
        ("dataset", ds.serialize()),
    ]
    if is_mlp:
        sections.append(("hidden_pre", fxp.pack_i64_mat(trace["hidden_pre"])))
        sections.append(("hidden_pre_rem", fxp.pack_i64_mat(trace["hidden_pre_rem"])))
        sections.append(("hidden_post", fxp.pack_i64_mat(trace["hidden_post"])))
    sections.append(("logits", fxp.pack_i64_mat(logits)))
    sections.append(("logits_rem", fxp.pack_i64_mat(trace["logits_rem"])))
    return count, ProofTranscript(KIND_ACCURACY, tuple(sections))


def _verify_affine(
    x: np.ndarray,
    wmat: np.ndarray,
    bias: np.ndarray,
    out: np.ndarray,
    rem: np.ndarray,
    seed: bytes,
    domain: str,
    reps: int,
):
    """Freivalds check of x @ wmat + bias*2^16 == out*2^16 + rem."""
    n, d = x.shape
    k = wmat.shape[1]
    if rem.size and (int(rem.min()) < 0 or int(rem.max()) >= fxp.SCALE):
        raise VerifyFail("range", f"{domain}: remainder outside [0, 2^16)")
    lhs_bound = d * _max_abs(x) * _max_abs(wmat) + fxp.SCALE * _max_abs(bias)
    rhs_bound = fxp.SCALE * _max_abs(out) + fxp.SCALE
    if lhs_bound >= _HALF_PRIME or rhs_bound >= _HALF_PRIME:
        raise VerifyFail("range", f"{domain}: operands exceed field headroom")
    chall = derive_challenge(seed, k * reps, domain)
    for rep in range(reps):
        v = np.asarray(chall[rep * k:(rep + 1) * k], dtype=np.int64)
        wv = _kernels.matvec_mod(wmat, v)
        xwv = _kernels.matvec_mod(x, wv)
        bv = (_mod_dot(bias, v) << fxp.FRACTION_BITS) % fxp.PRIME
        ov = _kernels.matvec_mod(out, v)
        rv = _kernels.matvec_mod(rem, v)
        for i in range(n):
            lhs = (int(xwv[i]) + bv) % fxp.PRIME
            rhs = ((int(ov[i]) << fxp.FRACTION_BITS) + int(rv[i])) % fxp.PRIME
            if lhs != rhs:
                raise VerifyFail("projection", f"{domain}: row {i} fails Freivalds check")


def verify_accuracy(
    t: ProofTranscript,
    expect_model: bytes | None = None,
    expect_dataset: bytes | None = None,
) -> int:
    """Replay the forward trace and argmax; returns the verified count."""
    if t.kind != KIND_ACCURACY:
        raise VerifyFail("malformed", f"kind {t.kind!r} is not accuracy")
    meta = t.meta()
    reps = _reps(meta)
    try:
        model = ModelWeights.deserialize(t.section("model"))
        ds = Dataset.deserialize(t.section("dataset"))
        logits = fxp.unpack_i64_mat(t.section("logits"))
        logits_rem = fxp.unpack_i64_mat(t.section("logits_rem"))
    except VerifyFail:
        raise
    except Exception as exc:
        raise VerifyFail("malformed", str(exc)) from exc
    _expect_digest(t, "model", expect_model)
    _expect_digest(t, "dataset", expect_dataset)
    n, d, k = int(meta["n"]), int(meta["d"]), int(meta["classes"])
    if (ds.n, ds.dim, ds.num_classes) != (n, d, k):
        raise VerifyFail("malformed", "dataset dims mismatch meta")
    if logits.shape != (n, k) or logits_rem.shape != (n, k):
        raise VerifyFail("malformed", "logits shape mismatch")
    names = {name for name, _ in model.layout}
    is_mlp = meta.get("model_kind") == "mlp"
    if is_mlp != ("fc1.weight" in names):
        raise VerifyFail("malformed", "model kind does not match layout")
    seed = t.challenge_seed()
    x = ds.features_raw
    if is_mlp:
        try:
            pre = fxp.unpack_i64_mat(t.section("hidden_pre"))
            pre_rem = fxp.unpack_i64_mat(t.section("hidden_pre_rem"))
            post = fxp.unpack_i64_mat(t.section("hidden_post"))
        except VerifyFail:
            raise
        except Exception as exc:
            raise VerifyFail("malformed", str(exc)) from exc
        w1 = model.get("fc1.weight")
        if pre.shape != (n, w1.shape[1]) or post.shape != pre.shape:
            raise VerifyFail("malformed", "hidden shape mismatch")
        _verify_affine(x, w1, model.get("fc1.bias"), pre, pre_rem, seed, "acc-fc1", reps)
        if not np.array_equal(post, np.maximum(pre, 0)):
            raise VerifyFail("relu", "post-activation is not max(pre, 0)")
        _verify_affine(
            post, model.get("fc2.weight"), model.get("fc2.bias"),
            logits, logits_rem, seed, "acc-fc2", reps,
        )
    else:
        if model.get("linear.weight").shape != (d, k):
            raise VerifyFail("malformed", "model shape mismatch")
        _verify_affine(
            x, model.get("linear.weight"), model.get("linear.bias"),
            logits, logits_rem, seed, "acc-linear", reps,
        )
    pred = np.argmax(logits, axis=1)
    count = int((pred == ds.labels).sum())
    if count != int(meta["count"]):
        raise VerifyFail("count", f"claimed {meta['count']}, replay says {count}")
    return count


# ---------------------------------------------------------------------------
# outlier
# ---------------------------------------------------------------------------

def prove_outlier(
    subs,
    gamma: fxp.FixedPoint,
    prev_removed: frozenset[int],
    report: DetectionReport,
    anchor: ModelWeights | None,
    reps: int = 1,
) -> ProofTranscript:
    """Package one detection round for replay.

    `anchor` is the benign average the cross-trainer stage used (None when
    the stage did not run). Round one's anchor is the Krum average, which
    the verifier replays from the committed Gram matrix; later rounds bind
    the anchor to the previous round's aggregate commitment.
    """
    ids = tuple(sorted(subs.entries))
    # trainers removed last round are not cosine-scored
    scored_prev = tuple(
        t for t in ids if t in (subs.previous or {}) and t not in prev_removed
    )
    meta = {
        "round": subs.round,
        "gamma_raw": gamma.raw,
        "ids": list(ids),
        "prev_ids": list(scored_prev),
        "prev_removed": sorted(prev_removed),
        "anchor_source": None,
        "report": report.to_json(),
        "reps": reps,
    }
    sections = [("meta", b"")]  # placeholder, rewritten below
    for tid in ids:
        sections.append((f"model:{tid}", subs.entries[tid].serialize()))
    for tid in scored_prev:
        sections.append((f"prev:{tid}", subs.previous[tid].serialize()))
    if report.cross_trainer_ran:
        if anchor is None:
            raise VerifyFail("malformed", "cross-trainer ran without an anchor")
        meta["anchor_source"] = "krum" if subs.round == 1 else "previous"
        rows = np.vstack(
            [stack_raws([subs.entries[t] for t in ids]), anchor.raws[np.newaxis, :]]
        )
        gram = _kernels.gram_exact(rows)
        sections.append(("anchor", anchor.serialize()))
        sections.append(("gram", fxp.pack_i128_mat(gram)))
    sections[0] = ("meta", canonical_json(meta))
    return ProofTranscript(KIND_OUTLIER, tuple(sections))


def _replay_krum(gram, ids: tuple[int, ...]) -> tuple[int, ...]:
    L = len(ids)
    neighbor_k = (L + 1) // 2
    m = max(1, L // 2)
    scores = []
    for i in range(L):
        dists = sorted(
            gram[i][i] - 2 * gram[i][j] + gram[j][j] for j in range(L) if j != i
        )
        scores.append((sum(dists[:neighbor_k]), ids[i]))
    scores.sort()
    return tuple(tid for _, tid in scores[:m])


def verify_outlier(
    t: ProofTranscript,
    expect_models: dict[int, bytes] | None = None,
    expect_prev: dict[int, bytes] | None = None,
    expect_anchor: bytes | None = None,
    expect_round: int | None = None,
    expect_gamma_raw: int | None = None,
    expect_prev_removed: frozenset[int] | None = None,
    expect_prev_present: frozenset[int] | None = None,
) -> DetectionReport:
    """Replay a detection round from the transcript alone.

    Every decision is re-derived: cosine flags from the opened model
    pairs, carryover from the declared previous removals, distances from
    the Freivalds-checked Gram matrix, sqrt/mean/variance from their
    witnesses, and the removed/kept partition from the strict boundary.
    The returned report is the replayed one, guaranteed equal to the
    transcript's claim.
    """
    if t.kind != KIND_OUTLIER:
        raise VerifyFail("malformed", f"kind {t.kind!r} is not outlier")
    meta = t.meta()
    reps = _reps(meta)
    try:
        report = DetectionReport.from_json(meta["report"])
        rnd = int(meta["round"])
        gamma_raw = int(meta["gamma_raw"])
        ids = tuple(int(x) for x in meta["ids"])
        prev_ids = tuple(int(x) for x in meta["prev_ids"])
        prev_removed = frozenset(int(x) for x in meta["prev_removed"])
    except VerifyFail:
        raise
    except Exception as exc:
        raise VerifyFail("malformed", f"bad outlier meta: {exc}") from exc
    if ids != tuple(sorted(set(ids))) or not ids:
        raise VerifyFail("malformed", "ids must be sorted and nonempty")
    if report.round != rnd:
        raise VerifyFail("malformed", "report round mismatch")

    # external bindings
    if expect_round is not None and rnd != expect_round:
        raise VerifyFail("binding", "round does not match expectation")
    if expect_gamma_raw is not None and gamma_raw != expect_gamma_raw:
        raise VerifyFail("binding", "gamma does not match expectation")
    if expect_prev_removed is not None and prev_removed != expect_prev_removed:
        raise VerifyFail("binding", "previous removals do not match expectation")
    if set(prev_ids) & prev_removed:
        raise VerifyFail("cosine", "scored a trainer removed last round")
    if expect_prev_present is not None:
        want = tuple(sorted((set(ids) & expect_prev_present) - prev_removed))
        if prev_ids != want:
            raise VerifyFail("binding", "previous-round membership mismatch")
    if expect_models is not None:
        if set(expect_models) != set(ids):
            raise VerifyFail("binding", "submitter set does not match expectation")
        for tid in ids:
            _expect_digest(t, f"model:{tid}", expect_models[tid])
    if expect_prev is not None:
        for tid in prev_ids:
            if tid not in expect_prev:
                raise VerifyFail("binding", f"no previous commitment for trainer {tid}")
            _expect_digest(t, f"prev:{tid}", expect_prev[tid])

    try:
        models = {
            tid: ModelWeights.deserialize(t.section(f"model:{tid}")) for tid in ids
        }
        prevs = {
            tid: ModelWeights.deserialize(t.section(f"prev:{tid}")) for tid in prev_ids
        }
    except VerifyFail:
        raise
    except Exception as exc:
        raise VerifyFail("malformed", str(exc)) from exc

    # stage one replay: exact cosine comparisons
    if rnd == 1:
        if prev_ids or report.cross_round_flagged or report.cross_round_scores:
            raise VerifyFail("cosine", "round one cannot have cross-round results")
        flagged: tuple[int, ...] = ()
    else:
        flagged = tuple(
            tid
            for tid in prev_ids
            if cosine_below(models[tid].raws, prevs[tid].raws, gamma_raw)
        )
        if set(report.cross_round_scores) != set(prev_ids):
            raise VerifyFail("cosine", "scored set mismatch")
    if flagged != tuple(report.cross_round_flagged):
        raise VerifyFail("cosine", "cross-round flags do not replay")

    carryover = bool(prev_removed & set(ids)) and rnd > 1
    if carryover != report.carryover:
        raise VerifyFail("carryover", "carryover bit does not replay")
    ran = rnd == 1 or bool(flagged) or carryover
    if ran != report.cross_trainer_ran:
        raise VerifyFail("carryover", "cross-trainer trigger does not replay")

    if not ran:
        if report.removed or tuple(report.kept) != ids or report.stats is not None:
            raise VerifyFail("partition", "skipped round must keep everyone")
        if report.attack_flagged != bool(flagged):
            raise VerifyFail("partition", "attack flag does not replay")
        return report

    # stage two replay
    stats = report.stats
    if stats is None or tuple(stats.ids) != ids:
        raise VerifyFail("malformed", "missing or misaligned stats")
    anchor_source = meta.get("anchor_source")
    if anchor_source not in ("krum", "previous"):
        raise VerifyFail("malformed", "bad anchor source")
    if (anchor_source == "krum") != (rnd == 1):
        raise VerifyFail("binding", "anchor source inconsistent with round")
    try:
        anchor = ModelWeights.deserialize(t.section("anchor"))
        gram = fxp.unpack_i128_mat(t.section("gram"))
    except VerifyFail:
        raise
    except Exception as exc:
        raise VerifyFail("malformed", str(exc)) from exc
    if anchor_source == "previous":
        _expect_digest(t, "anchor", expect_anchor)

    L = len(ids)
    if len(gram) != L + 1 or any(len(row) != L + 1 for row in gram):
        raise VerifyFail("malformed", "gram dimensions mismatch")
    rows = np.vstack(
        [stack_raws([models[tid] for tid in ids]), anchor.raws[np.newaxis, :]]
    )
    n_params = rows.shape[1]
    if n_params * _max_abs(rows) ** 2 >= _HALF_PRIME:
        raise VerifyFail("range", "gram operands exceed field headroom")
    if any(abs(g) >= _HALF_PRIME for row in gram for g in row):
        raise VerifyFail("range", "gram entry exceeds field headroom")
    seed = t.challenge_seed()
    chall = derive_challenge(seed, (L + 1) * reps, "outlier-gram")
    rows_t = np.ascontiguousarray(rows.T)
    for rep in range(reps):
        v = np.asarray(chall[rep * (L + 1):(rep + 1) * (L + 1)], dtype=np.int64)
        utv = _kernels.matvec_mod(rows_t, v)
        lhs = _kernels.matvec_mod(rows, utv)
        for i in range(L + 1):
            rhs = _mod_dot(gram[i], v)
            if int(lhs[i]) != rhs:
                raise VerifyFail("projection", "gram fails Freivalds check")

    for idx, tid in enumerate(ids):
        d = gram[idx][idx] - 2 * gram[idx][L] + gram[L][L]
        if d != stats.sq_dists[idx]:
            raise VerifyFail("distance", f"squared distance mismatch for trainer {tid}")
        x = stats.dist_raws[idx]
        if x < 0 or not fxp.isqrt_check(d, x):
            raise VerifyFail("sqrt", f"distance witness fails for trainer {tid}")
    n = L
    if not (0 <= stats.mu_rem < n) or sum(stats.dist_raws) != n * stats.mu_raw + stats.mu_rem:
        raise VerifyFail("division", "mean witness fails")
    var_num = sum((x - stats.mu_raw) ** 2 for x in stats.dist_raws)
    if var_num != stats.var_num:
        raise VerifyFail("variance", "squared deviations do not replay")
    if not (0 <= stats.var_rem < n - 1) or var_num != (n - 1) * stats.var_q + stats.var_rem:
        raise VerifyFail("division", "variance witness fails")
    if stats.sigma_raw < 0 or not fxp.isqrt_check(stats.var_q, stats.sigma_raw):
        raise VerifyFail("sqrt", "sigma witness fails")
    if stats.boundary_raw != stats.mu_raw + stats.sigma_raw:
        raise VerifyFail("division", "boundary is not mu + sigma")
    removed = tuple(
        tid for tid, x in zip(ids, stats.dist_raws) if x > stats.boundary_raw
    )
    kept = tuple(tid for tid in ids if tid not in removed)
    if removed != tuple(stats.removed) or kept != tuple(stats.kept):
        raise VerifyFail("partition", "removed/kept sets do not replay")
    if tuple(report.removed) != removed or tuple(report.kept) != kept:
        raise VerifyFail("partition", "report partition mismatch")
    if report.attack_flagged != (bool(flagged) or bool(removed)):
        raise VerifyFail("partition", "attack flag does not replay")
    if anchor_source == "krum":
        selected = _replay_krum([row[:L] for row in gram[:L]], ids)
        m_count = len(selected)
        sel_rows = stack_raws([models[tid] for tid in selected])
        want, rem = _kernels.weighted_sum_floor(
            sel_rows, np.ones(m_count, dtype=np.int64), m_count
        )
        if not np.array_equal(want, anchor.raws):
            raise VerifyFail("krum", "anchor is not the krum average")
    # float fields must be decoded views of the integer stats
    if (
        report.mu != stats.mu_raw / fxp.SCALE
        or report.sigma != stats.sigma_raw / fxp.SCALE
        or report.boundary != stats.boundary_raw / fxp.SCALE
    ):
        raise VerifyFail("partition", "float summary drifts from integer stats")
    return report
