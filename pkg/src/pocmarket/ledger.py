"""Simulated chain: content-addressed storage and the escrow contract.

The store maps sha256 hex digests to immutable blobs; a cid is that
digest, so "the store holds the committed bytes" is checkable by
rehashing. The contract is a deterministic state machine driven by an
ordered sequence of operation calls (the simulation's stand-in for a
transaction queue). Every operation validates against current state
before mutating anything, so a rejected call is side-effect free.

Phases and transitions:

    registration -> local_training(1)            (last trainer registers)
    local_training(t) -> awaiting_aggregator(t)  (all submitted, or quorum
                                                  met at the deadline)
    local_training(t) -> aborted                 (deadline below quorum)
    awaiting_aggregator(t) -> verification(t)    (aggregator submits round)
    verification(t) -> local_training(t+1)       (transcripts verify, t < T)
    verification(t) -> awaiting_finalize         (transcripts verify, t == T)
    verification(t) -> aborted                   (any transcript fails)
    awaiting_finalize -> reward_spread           (finalize verifies)
    awaiting_finalize -> aborted                 (finalize fails)
    registration -> aborted                      (owner cancels)

Money: the owner's deposit is escrowed at deploy and must cover the
worst case (every trainer's participation fee, the aggregator fee, and
the full reward pool). Honest trainers are guaranteed the participation
fee; the performance pool is alpha = max(0, total_reward - L'*fee)
split by clipped contribution shares with floor rounding; whatever the
floors and the accuracy shortfall leave over returns to the owner. On
abort, trainers that were kept in at least one verified round still
collect the participation fee. Every terminal state conserves tokens:
deposit == payouts + aggregator fee + owner refund.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from fractions import Fraction

from pocmarket.contribution import (
    ContributionVector,
    normalize_and_total,
    reward_shares,
    sample_subset,
    subset_size,
)
from pocmarket.errors import (
    DuplicateRegistration,
    DuplicateSubmission,
    InsufficientDeposit,
    InvalidDescriptor,
    MissingTranscript,
    NotFound,
    UnknownTrainer,
    VerifyFail,
    WrongPhase,
    WrongRound,
)
from pocmarket.mlcore import Dataset, split_owner_data
from pocmarket.outlier import DetectionReport
from pocmarket.verify import (
    ProofTranscript,
    canonical_json,
    sha256,
    verify_accuracy,
    verify_aggregation,
    verify_outlier,
)


class ContentStore:
    """Content-addressed blob store (cid = sha256 hex of the bytes)."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}

    def put(self, data: bytes) -> str:
        cid = hashlib.sha256(data).hexdigest()
        self._blobs[cid] = data
        return cid

    def get(self, cid: str) -> bytes:
        try:
            return self._blobs[cid]
        except KeyError:
            raise NotFound(f"no blob for cid {cid[:16]}...") from None

    def has(self, cid: str) -> bool:
        return cid in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


@dataclass(frozen=True)
class Phase:
    stage: str
    round: int = 0

    def __str__(self):
        return f"{self.stage}:{self.round}" if self.round else self.stage


REGISTRATION = "registration"
LOCAL_TRAINING = "local_training"
AWAITING_AGGREGATOR = "awaiting_aggregator"
VERIFICATION = "verification"
AWAITING_FINALIZE = "awaiting_finalize"
REWARD_SPREAD = "reward_spread"
ABORTED = "aborted"


@dataclass(frozen=True)
class RewardSchedule:
    participation_fee: int
    pool: int
    aggregator_fee: int
    acc_base: Fraction
    acc_target: Fraction

    def validate(self):
        if min(self.participation_fee, self.pool, self.aggregator_fee) < 0:
            raise InvalidDescriptor("fees and pool must be nonnegative")
        if not (0 <= self.acc_base < self.acc_target <= 1):
            raise InvalidDescriptor("need 0 <= acc_base < acc_target <= 1")

    def to_json(self) -> dict:
        return {
            "participation_fee": self.participation_fee,
            "pool": self.pool,
            "aggregator_fee": self.aggregator_fee,
            "acc_base": str(self.acc_base),
            "acc_target": str(self.acc_target),
        }


@dataclass(frozen=True)
class TaskDescriptor:
    model_kind: str
    dim: int
    classes: int
    hidden: int
    rounds: int
    min_trainers: int
    quorum: int
    gamma_raw: int
    aggregation_mode: str
    schedule: RewardSchedule
    split: str = "registration"          # registration | explicit
    owner_data_cid: str | None = None
    validation_cid: str | None = None
    test_cid: str | None = None
    hyperparams: dict | None = None
    rloo_repetitions: int = 1

    def validate(self, store: ContentStore):
        if self.model_kind not in ("lr", "mlp"):
            raise InvalidDescriptor(f"unknown model kind {self.model_kind!r}")
        if self.rounds < 1:
            raise InvalidDescriptor("need at least one round")
        if self.min_trainers < 1:
            raise InvalidDescriptor("need at least one trainer")
        if not 1 <= self.quorum <= self.min_trainers:
            raise InvalidDescriptor("quorum must be in [1, min_trainers]")
        if self.aggregation_mode not in ("weighted", "predivided"):
            raise InvalidDescriptor(f"unknown mode {self.aggregation_mode!r}")
        if self.rloo_repetitions < 1:
            raise InvalidDescriptor("rloo repetitions must be >= 1")
        self.schedule.validate()
        if self.split == "registration":
            if not self.owner_data_cid:
                raise InvalidDescriptor("registration split needs the owner data cid")
            if not store.has(self.owner_data_cid):
                raise InvalidDescriptor("owner data cid not found in store")
        elif self.split == "explicit":
            if not self.validation_cid:
                raise InvalidDescriptor("explicit split needs a validation cid")
            if not self.test_cid:
                raise InvalidDescriptor("explicit split needs a test cid")
            for cid in (self.validation_cid, self.test_cid):
                if not store.has(cid):
                    raise InvalidDescriptor("referenced dataset cid not found")
        else:
            raise InvalidDescriptor(f"unknown split {self.split!r}")

    def to_json(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "dim": self.dim,
            "classes": self.classes,
            "hidden": self.hidden,
            "rounds": self.rounds,
            "min_trainers": self.min_trainers,
            "quorum": self.quorum,
            "gamma_raw": self.gamma_raw,
            "aggregation_mode": self.aggregation_mode,
            "schedule": self.schedule.to_json(),
            "split": self.split,
            "owner_data_cid": self.owner_data_cid,
            "validation_cid": self.validation_cid,
            "test_cid": self.test_cid,
            "hyperparams": self.hyperparams,
            "rloo_repetitions": self.rloo_repetitions,
        }


@dataclass(frozen=True)
class TrainerInfo:
    trainer_id: int
    address: str
    pubkey: str
    n_samples: int


@dataclass
class RoundRecord:
    round: int
    base_cid: str | None = None
    local_cids: dict[int, str] = field(default_factory=dict)
    claimed_report: dict | None = None
    aggregate_cid: str | None = None
    outlier_tcid: str | None = None
    aggregation_tcid: str | None = None
    accuracy_tcid: str | None = None
    val_count: int | None = None
    val_n: int | None = None
    kept: tuple[int, ...] | None = None
    removed: tuple[int, ...] | None = None
    verified: bool = False

    def snapshot(self) -> dict:
        return {
            "round": self.round,
            "base_cid": self.base_cid,
            "local_cids": {str(k): v for k, v in sorted(self.local_cids.items())},
            "claimed_report": self.claimed_report,
            "aggregate_cid": self.aggregate_cid,
            "outlier_tcid": self.outlier_tcid,
            "aggregation_tcid": self.aggregation_tcid,
            "accuracy_tcid": self.accuracy_tcid,
            "val_count": self.val_count,
            "val_n": self.val_n,
            "kept": list(self.kept) if self.kept is not None else None,
            "removed": list(self.removed) if self.removed is not None else None,
            "verified": self.verified,
        }


@dataclass(frozen=True)
class RlooEntry:
    round: int
    trainer: int
    rep: int
    subset: tuple[int, ...]
    with_count: int
    without_count: int
    with_agg_tcid: str
    with_acc_tcid: str
    without_agg_tcid: str | None
    without_acc_tcid: str

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "trainer": self.trainer,
            "rep": self.rep,
            "subset": list(self.subset),
            "with_count": self.with_count,
            "without_count": self.without_count,
            "with_agg_tcid": self.with_agg_tcid,
            "with_acc_tcid": self.with_acc_tcid,
            "without_agg_tcid": self.without_agg_tcid,
            "without_acc_tcid": self.without_acc_tcid,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RlooEntry":
        return cls(
            round=int(obj["round"]),
            trainer=int(obj["trainer"]),
            rep=int(obj["rep"]),
            subset=tuple(int(x) for x in obj["subset"]),
            with_count=int(obj["with_count"]),
            without_count=int(obj["without_count"]),
            with_agg_tcid=obj["with_agg_tcid"],
            with_acc_tcid=obj["with_acc_tcid"],
            without_agg_tcid=obj["without_agg_tcid"],
            without_acc_tcid=obj["without_acc_tcid"],
        )


@dataclass(frozen=True)
class FinalizeMessage:
    contributions: ContributionVector
    entries: tuple[RlooEntry, ...]
    final_count: int
    final_n: int
    final_acc_tcid: str

    def to_json(self) -> dict:
        return {
            "contributions": self.contributions.to_json(),
            "entries": [e.to_json() for e in self.entries],
            "final_count": self.final_count,
            "final_n": self.final_n,
            "final_acc_tcid": self.final_acc_tcid,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FinalizeMessage":
        return cls(
            contributions=ContributionVector.from_json(obj["contributions"]),
            entries=tuple(RlooEntry.from_json(e) for e in obj["entries"]),
            final_count=int(obj["final_count"]),
            final_n=int(obj["final_n"]),
            final_acc_tcid=obj["final_acc_tcid"],
        )


def required_deposit(descriptor: TaskDescriptor) -> int:
    s = descriptor.schedule
    return (
        descriptor.min_trainers * s.participation_fee
        + s.aggregator_fee
        + s.pool
    )


class Contract:
    """The escrow contract plus its verification duties."""

    def __init__(
        self,
        store: ContentStore,
        descriptor: TaskDescriptor,
        owner: str,
        aggregator: str,
        deposit: int,
    ):
        self.store = store
        self.descriptor = descriptor
        self.owner = owner
        self.aggregator = aggregator
        self.deposit = deposit
        self.digest = hashlib.sha256(
            canonical_json(
                {
                    "descriptor": descriptor.to_json(),
                    "owner": owner,
                    "aggregator": aggregator,
                    "deposit": deposit,
                }
            )
        ).hexdigest()
        self.phase = Phase(REGISTRATION)
        self.registry: dict[int, TrainerInfo] = {}
        self.rounds: list[RoundRecord] = []
        self.validation_cid = descriptor.validation_cid
        self.test_cid = descriptor.test_cid
        self.split_seed: str | None = None
        self.rloo_seed: str | None = None
        self.participation: set[int] = set()
        self.removed_ever: set[int] = set()
        self.payouts: dict[str, int] = {}
        self.fee_paid = 0
        self.refund = 0
        self.paid = False
        self.abort_reason: str | None = None
        self.final: dict | None = None
        self.events: list[dict] = []
        self._seq = 0

    # -- bookkeeping ---------------------------------------------------------

    def _emit(self, event: str, **fields):
        self._seq += 1
        entry = {"seq": self._seq, "event": event, "phase": str(self.phase)}
        entry.update(fields)
        self.events.append(entry)

    def _require_phase(self, stage: str, rnd: int | None = None):
        if self.phase.stage != stage:
            raise WrongPhase(f"op needs {stage}, contract is in {self.phase}")
        if rnd is not None and self.phase.round != rnd:
            raise WrongRound(f"op addresses round {rnd}, active is {self.phase.round}")

    def _record(self, rnd: int) -> RoundRecord:
        return self.rounds[rnd - 1]

    def snapshot(self) -> dict:
        """Canonical state view (used for rejected-op invariance checks)."""
        return {
            "phase": str(self.phase),
            "digest": self.digest,
            "deposit": self.deposit,
            "registry": {
                str(t): [i.address, i.pubkey, i.n_samples]
                for t, i in sorted(self.registry.items())
            },
            "rounds": [r.snapshot() for r in self.rounds],
            "validation_cid": self.validation_cid,
            "test_cid": self.test_cid,
            "split_seed": self.split_seed,
            "rloo_seed": self.rloo_seed,
            "participation": sorted(self.participation),
            "removed_ever": sorted(self.removed_ever),
            "payouts": dict(sorted(self.payouts.items())),
            "fee_paid": self.fee_paid,
            "refund": self.refund,
            "paid": self.paid,
            "abort_reason": self.abort_reason,
            "final": self.final,
            "n_events": len(self.events),
        }

    # -- deployment and registration ------------------------------------------

    @classmethod
    def deploy(
        cls,
        store: ContentStore,
        descriptor: TaskDescriptor,
        owner: str,
        aggregator: str,
        deposit: int,
    ) -> "Contract":
        descriptor.validate(store)
        need = required_deposit(descriptor)
        if deposit < need:
            raise InsufficientDeposit(f"deposit {deposit} below required {need}")
        contract = cls(store, descriptor, owner, aggregator, deposit)
        contract._emit(
            "deploy",
            digest=contract.digest,
            deposit=deposit,
            descriptor=descriptor.to_json(),
            owner=owner,
            aggregator=aggregator,
        )
        return contract

    def register(self, trainer_id: int, address: str, pubkey: str, n_samples: int):
        self._require_phase(REGISTRATION)
        if trainer_id in self.registry:
            raise DuplicateRegistration(f"trainer {trainer_id} already registered")
        if n_samples < 1:
            raise InvalidDescriptor("trainer must hold at least one sample")
        self.registry[trainer_id] = TrainerInfo(trainer_id, address, pubkey, n_samples)
        self._emit(
            "register",
            trainer=trainer_id,
            address=address,
            pubkey=pubkey,
            n_samples=n_samples,
        )
        if len(self.registry) == self.descriptor.min_trainers:
            self._registration_complete()

    def _derive_seed(self, domain: str) -> bytes:
        ids = canonical_json(sorted(self.registry))
        return hashlib.sha256(
            domain.encode("utf-8") + bytes.fromhex(self.digest) + ids
        ).digest()

    def _registration_complete(self):
        if self.descriptor.split == "registration":
            seed = self._derive_seed("pocmarket/owner-split")
            owner_ds = Dataset.deserialize(self.store.get(self.descriptor.owner_data_cid))
            val, test = split_owner_data(owner_ds, seed)
            self.validation_cid = self.store.put(val.serialize())
            self.test_cid = self.store.put(test.serialize())
            self.split_seed = seed.hex()
            self._emit(
                "split_resolved",
                validation_cid=self.validation_cid,
                test_cid=self.test_cid,
            )
        self.rloo_seed = self._derive_seed("pocmarket/rloo").hex()
        self.phase = Phase(LOCAL_TRAINING, 1)
        self.rounds.append(RoundRecord(round=1))
        self._emit("training_started", round=1, base_cid=None)

    def cancel(self):
        """Owner backs out before training starts; full refund."""
        self._require_phase(REGISTRATION)
        self.abort_reason = "cancelled"
        self.refund = self.deposit
        self.phase = Phase(ABORTED)
        self._emit("aborted", reason="cancelled", payouts={}, refund=self.refund)

    # -- per-round flow ---------------------------------------------------------

    def post_base(self, cid: str):
        self._require_phase(LOCAL_TRAINING, 1)
        record = self._record(1)
        if record.base_cid is not None:
            raise DuplicateSubmission("base model already posted")
        if not self.store.has(cid):
            raise NotFound("base model blob not in store")
        record.base_cid = cid
        self._emit("base_posted", round=1, cid=cid)

    def submit_local(self, trainer_id: int, rnd: int, cid: str):
        self._require_phase(LOCAL_TRAINING, rnd)
        if trainer_id not in self.registry:
            raise UnknownTrainer(f"trainer {trainer_id} is not registered")
        record = self._record(rnd)
        if record.base_cid is None:
            raise WrongPhase("base model not posted yet")
        if trainer_id in record.local_cids:
            raise DuplicateSubmission(f"trainer {trainer_id} already submitted")
        if not self.store.has(cid):
            raise NotFound("submitted model blob not in store")
        record.local_cids[trainer_id] = cid
        self._emit("local_submitted", round=rnd, trainer=trainer_id, cid=cid)
        if len(record.local_cids) == len(self.registry):
            self.phase = Phase(AWAITING_AGGREGATOR, rnd)
            self._emit("submissions_closed", round=rnd, submitted=len(record.local_cids))

    def close_submissions(self, rnd: int):
        """Deadline tick: advance on quorum, abort otherwise."""
        self._require_phase(LOCAL_TRAINING, rnd)
        record = self._record(rnd)
        if record.base_cid is None:
            raise WrongPhase("base model not posted yet")
        submitted = len(record.local_cids)
        if submitted >= self.descriptor.quorum:
            self.phase = Phase(AWAITING_AGGREGATOR, rnd)
            self._emit("deadline", round=rnd, submitted=submitted, outcome="advance")
        else:
            self._emit("deadline", round=rnd, submitted=submitted, outcome="abort")
            self._abort(f"round {rnd} quorum not met")

    def submit_round(
        self,
        rnd: int,
        report_json: dict,
        aggregate_cid: str,
        outlier_tcid: str,
        aggregation_tcid: str,
        accuracy_tcid: str,
        val_count: int,
        val_n: int,
    ):
        self._require_phase(AWAITING_AGGREGATOR, rnd)
        record = self._record(rnd)
        record.claimed_report = report_json
        record.aggregate_cid = aggregate_cid
        record.outlier_tcid = outlier_tcid
        record.aggregation_tcid = aggregation_tcid
        record.accuracy_tcid = accuracy_tcid
        record.val_count = val_count
        record.val_n = val_n
        self.phase = Phase(VERIFICATION, rnd)
        self._emit(
            "round_submitted",
            round=rnd,
            aggregate_cid=aggregate_cid,
            outlier_tcid=outlier_tcid,
            aggregation_tcid=aggregation_tcid,
            accuracy_tcid=accuracy_tcid,
            val_count=val_count,
            val_n=val_n,
        )

    def _fetch_transcript(self, cid: str | None, what: str) -> ProofTranscript:
        if cid is None or not self.store.has(cid):
            raise MissingTranscript(f"{what} transcript missing from store")
        return ProofTranscript.parse(self.store.get(cid))

    def _abort(self, reason: str):
        self.abort_reason = reason
        earned = sorted(self.participation - self.removed_ever)
        fee = self.descriptor.schedule.participation_fee
        payouts: dict[str, int] = {}
        for tid in earned:
            addr = self.registry[tid].address
            payouts[addr] = payouts.get(addr, 0) + fee
        self.payouts = payouts
        self.fee_paid = 0
        self.refund = self.deposit - sum(payouts.values())
        self.paid = True
        self.phase = Phase(ABORTED)
        self._emit("aborted", reason=reason, payouts=payouts, refund=self.refund)

    def verify_round(self, rnd: int):
        """Replay the round's transcripts; advance on success, abort on failure."""
        self._require_phase(VERIFICATION, rnd)
        record = self._record(rnd)
        outlier_t = self._fetch_transcript(record.outlier_tcid, "outlier")
        agg_t = self._fetch_transcript(record.aggregation_tcid, "aggregation")
        acc_t = self._fetch_transcript(record.accuracy_tcid, "accuracy")
        try:
            report = self._verify_round_inner(rnd, record, outlier_t, agg_t, acc_t)
        except VerifyFail as exc:
            self._emit("verify_failed", round=rnd, stage=exc.stage, detail=exc.detail)
            self._abort(f"round {rnd} verification failed at {exc.stage}")
            return
        record.kept = tuple(report.kept)
        record.removed = tuple(report.removed)
        record.verified = True
        self.participation.update(report.kept)
        self.removed_ever.update(report.removed)
        self._emit(
            "round_verified",
            round=rnd,
            kept=list(report.kept),
            removed=list(report.removed),
            attack_flagged=report.attack_flagged,
            val_count=record.val_count,
            val_n=record.val_n,
            report=report.to_json(),
        )
        if rnd < self.descriptor.rounds:
            self.phase = Phase(LOCAL_TRAINING, rnd + 1)
            self.rounds.append(
                RoundRecord(round=rnd + 1, base_cid=record.aggregate_cid)
            )
            self._emit(
                "training_started", round=rnd + 1, base_cid=record.aggregate_cid
            )
        else:
            self.phase = Phase(AWAITING_FINALIZE)
            self._emit("awaiting_finalize")

    def _verify_round_inner(
        self,
        rnd: int,
        record: RoundRecord,
        outlier_t: ProofTranscript,
        agg_t: ProofTranscript,
        acc_t: ProofTranscript,
    ) -> DetectionReport:
        expect_models = {
            tid: bytes.fromhex(cid) for tid, cid in record.local_cids.items()
        }
        if rnd > 1:
            prev = self._record(rnd - 1)
            expect_prev = {
                tid: bytes.fromhex(cid) for tid, cid in prev.local_cids.items()
            }
            expect_anchor = bytes.fromhex(prev.aggregate_cid)
            expect_prev_removed = frozenset(prev.removed)
            expect_prev_present = frozenset(prev.local_cids)
        else:
            expect_prev = {}
            expect_anchor = None
            expect_prev_removed = frozenset()
            expect_prev_present = frozenset()
        report = verify_outlier(
            outlier_t,
            expect_models=expect_models,
            expect_prev=expect_prev,
            expect_anchor=expect_anchor,
            expect_round=rnd,
            expect_gamma_raw=self.descriptor.gamma_raw,
            expect_prev_removed=expect_prev_removed,
            expect_prev_present=expect_prev_present,
        )
        if record.claimed_report != report.to_json():
            raise VerifyFail("binding", "claimed detection report does not match replay")

        agg_meta = agg_t.meta()
        if agg_meta.get("mode") != self.descriptor.aggregation_mode:
            raise VerifyFail("binding", "aggregation mode mismatch")
        kept_models = {
            tid: bytes.fromhex(record.local_cids[tid]) for tid in report.kept
        }
        if self.descriptor.aggregation_mode == "weighted":
            expect_weights = {
                tid: self.registry[tid].n_samples for tid in report.kept
            }
        else:
            if int(agg_meta.get("total", -1)) != self.descriptor.min_trainers:
                raise VerifyFail("binding", "predivided total mismatch")
            expect_weights = {
                tid: self.descriptor.min_trainers for tid in report.kept
            }
        verify_aggregation(
            agg_t,
            expect_models=kept_models,
            expect_agg=bytes.fromhex(record.aggregate_cid),
            expect_weights=expect_weights,
        )

        count = verify_accuracy(
            acc_t,
            expect_model=bytes.fromhex(record.aggregate_cid),
            expect_dataset=bytes.fromhex(self.validation_cid),
        )
        if count != record.val_count:
            raise VerifyFail("binding", "validation count does not match claim")
        ds_n = int(acc_t.meta()["n"])
        if ds_n != record.val_n:
            raise VerifyFail("binding", "validation size does not match claim")
        return report

    # -- finalize ------------------------------------------------------------------

    def honest_trainers(self) -> tuple[int, ...]:
        return tuple(sorted(self.participation - self.removed_ever))

    def round_seed(self, rnd: int) -> bytes:
        return bytes.fromhex(self.rloo_seed) + struct.pack("<I", rnd)

    def finalize(self, msg: FinalizeMessage):
        """Re-derive coalitions, replay transcripts, recompute the exact
        contribution vector, and lock in the payout split."""
        self._require_phase(AWAITING_FINALIZE)
        try:
            self._finalize_inner(msg)
        except VerifyFail as exc:
            self._emit("finalize_rejected", stage=exc.stage, detail=exc.detail)
            self._abort(f"finalize failed at {exc.stage}")

    def _verify_rloo_coalition(
        self, record: RoundRecord, coalition: tuple[int, ...], agg_tcid: str
    ) -> bytes:
        """Verify one coalition aggregate transcript; returns the digest of
        the aggregate model it certifies."""
        t = self._fetch_transcript(agg_tcid, "coalition aggregation")
        meta = t.meta()
        if meta.get("mode") != self.descriptor.aggregation_mode:
            raise VerifyFail("binding", "coalition aggregation mode mismatch")
        expect_models = {
            tid: bytes.fromhex(record.local_cids[tid]) for tid in coalition
        }
        if self.descriptor.aggregation_mode == "weighted":
            expect_weights = {tid: self.registry[tid].n_samples for tid in coalition}
        else:
            if int(meta.get("total", -1)) != self.descriptor.min_trainers:
                raise VerifyFail("binding", "predivided total mismatch")
            expect_weights = {tid: self.descriptor.min_trainers for tid in coalition}
        agg = verify_aggregation(
            t, expect_models=expect_models, expect_weights=expect_weights
        )
        return sha256(agg.serialize())

    def _verify_rloo_entry(self, entry: RlooEntry, record: RoundRecord):
        with_digest = self._verify_rloo_coalition(
            record, entry.subset, entry.with_agg_tcid
        )
        acc_t = self._fetch_transcript(entry.with_acc_tcid, "coalition accuracy")
        count = verify_accuracy(
            acc_t,
            expect_model=with_digest,
            expect_dataset=bytes.fromhex(self.test_cid),
        )
        if count != entry.with_count:
            raise VerifyFail("contribution", "with-count does not match transcript")
        without = tuple(t for t in entry.subset if t != entry.trainer)
        if without:
            without_digest = self._verify_rloo_coalition(
                record, without, entry.without_agg_tcid
            )
        else:
            without_digest = bytes.fromhex(record.base_cid)
        acc_t = self._fetch_transcript(entry.without_acc_tcid, "coalition accuracy")
        count = verify_accuracy(
            acc_t,
            expect_model=without_digest,
            expect_dataset=bytes.fromhex(self.test_cid),
        )
        if count != entry.without_count:
            raise VerifyFail("contribution", "without-count does not match transcript")

    def _finalize_inner(self, msg: FinalizeMessage):
        last = self.rounds[-1]
        final_t = self._fetch_transcript(msg.final_acc_tcid, "final accuracy")
        count = verify_accuracy(
            final_t,
            expect_model=bytes.fromhex(last.aggregate_cid),
            expect_dataset=bytes.fromhex(self.test_cid),
        )
        if count != msg.final_count or int(final_t.meta()["n"]) != msg.final_n:
            raise VerifyFail("binding", "final accuracy claim mismatch")

        honest = self.honest_trainers()
        reps = self.descriptor.rloo_repetitions
        by_key = {(e.round, e.trainer, e.rep): e for e in msg.entries}
        if len(by_key) != len(msg.entries):
            raise VerifyFail("contribution", "duplicate measurement entries")
        expected_keys = set()
        per_round: list[dict[int, Fraction]] = []
        for record in self.rounds:
            if not record.verified:
                continue
            ids = tuple(t for t in sorted(record.kept) if t in honest)
            if not ids:
                per_round.append({})
                continue
            k = subset_size(len(ids))
            seed = self.round_seed(record.round)
            scores: dict[int, Fraction] = {}
            for trainer in ids:
                total = Fraction(0)
                for rep in range(reps):
                    key = (record.round, trainer, rep)
                    expected_keys.add(key)
                    entry = by_key.get(key)
                    if entry is None:
                        raise VerifyFail("contribution", f"missing entry {key}")
                    want = sample_subset(ids, trainer, k, seed, rep)
                    if entry.subset != want:
                        raise VerifyFail("contribution", f"coalition mismatch at {key}")
                    self._verify_rloo_entry(entry, record)
                    total += Fraction(
                        entry.with_count - entry.without_count, msg.final_n
                    )
                scores[trainer] = total / reps
            per_round.append(scores)
        if set(by_key) != expected_keys:
            raise VerifyFail("contribution", "unexpected extra measurement entries")

        cv = normalize_and_total(per_round)
        claimed = msg.contributions
        if (
            cv.ids != claimed.ids
            or cv.per_round != claimed.per_round
            or cv.normalized != claimed.normalized
            or cv.totals != claimed.totals
        ):
            raise VerifyFail("contribution", "contribution vector does not replay")

        sched = self.descriptor.schedule
        acc_final = Fraction(msg.final_count, msg.final_n)
        span = sched.acc_target - sched.acc_base
        ratio = (acc_final - sched.acc_base) / span
        ratio = min(max(ratio, Fraction(0)), Fraction(1))
        total_reward = int(sched.pool * ratio)  # floor: pool, ratio >= 0
        fee = sched.participation_fee
        alpha = max(0, total_reward - len(honest) * fee)
        shares = reward_shares(cv)
        rewards: dict[int, int] = {}
        for tid in honest:
            share = shares.get(tid, Fraction(0))
            rewards[tid] = fee + int(alpha * share)
        payouts: dict[str, int] = {}
        for tid, amount in rewards.items():
            addr = self.registry[tid].address
            payouts[addr] = payouts.get(addr, 0) + amount
        self.payouts = payouts
        self.fee_paid = sched.aggregator_fee
        self.refund = self.deposit - sum(payouts.values()) - self.fee_paid
        if self.refund < 0:
            raise VerifyFail("conservation", "payouts exceed escrowed deposit")
        self.final = {
            "contributions": cv.to_json(),
            "final_count": msg.final_count,
            "final_n": msg.final_n,
            "total_reward": total_reward,
            "alpha": alpha,
            "honest": list(honest),
            "rewards": {str(t): v for t, v in sorted(rewards.items())},
        }
        self.phase = Phase(REWARD_SPREAD)
        self._emit(
            "finalize_accepted",
            final_count=msg.final_count,
            final_n=msg.final_n,
            total_reward=total_reward,
            alpha=alpha,
            honest=list(honest),
            rewards={str(t): v for t, v in sorted(rewards.items())},
            contributions=cv.to_json(),
        )

    def spread_rewards(self) -> dict[str, int]:
        """Execute the transfers decided at finalize. Terminal."""
        self._require_phase(REWARD_SPREAD)
        if self.paid:
            raise WrongPhase("rewards already spread")
        self.paid = True
        self._emit(
            "reward_spread",
            payouts=dict(sorted(self.payouts.items())),
            aggregator_fee=self.fee_paid,
            refund=self.refund,
        )
        return dict(self.payouts)

    # -- invariants -------------------------------------------------------------

    def tokens_conserved(self) -> bool:
        if self.phase.stage not in (REWARD_SPREAD, ABORTED):
            return True
        return self.deposit == sum(self.payouts.values()) + self.fee_paid + self.refund
