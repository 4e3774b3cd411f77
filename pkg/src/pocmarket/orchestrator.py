"""Scenario driver: plays owner, trainers, and aggregator against the contract.

A scenario is fully determined by its config (one integer seed fans out
into independent substreams for data, init, and per-trainer training),
so reruns are byte-identical. The human-readable run report is folded
from the contract's event log alone, which makes replay-from-events
equality structural rather than something to hope for.

The `tamper` argument injects one dishonest-aggregator action into an
otherwise honest run. Supported kinds:

    {"kind": "aggregate",    "round": t}   publish a corrupted aggregate
    {"kind": "report",       "round": t}   misstate the detection outcome
    {"kind": "accuracy",     "round": t}   inflate the validation count
    {"kind": "contribution"}               misstate a contribution value
    {"kind": "subset"}                     score a swapped RLOO coalition

Each of these must end with the contract aborting; that is what the
verification layer is for.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from pocmarket import fxp
from pocmarket.contribution import (
    normalize_and_total,
    sample_subset,
    subset_size,
)
from pocmarket.errors import ConfigError
from pocmarket.ledger import (
    ABORTED,
    AWAITING_FINALIZE,
    LOCAL_TRAINING,
    REWARD_SPREAD,
    ContentStore,
    Contract,
    FinalizeMessage,
    RewardSchedule,
    RlooEntry,
    TaskDescriptor,
    required_deposit,
)
from pocmarket.linalg import ModelWeights
from pocmarket.mlcore import (
    AttackSpec,
    Dataset,
    TrainerConfig,
    apply_attack,
    init_weights,
    make_blobs,
    partition,
    split_owner_data,
    train_local,
)
from pocmarket.outlier import DetectorState, RoundSubmissions, detect, krum_average
from pocmarket.verify import (
    canonical_json,
    prove_accuracy,
    prove_aggregation,
    prove_outlier,
)

# substream tags under the scenario seed
_DATA, _INIT, _TRAIN, _SPLIT = 0, 1, 2, 3


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    trainers: int = 5
    rounds: int = 3
    model: str = "lr"
    dim: int = 20
    classes: int = 10
    hidden: int = 32
    samples_per_trainer: int = 200
    owner_samples: int = 1000
    mean_scale: float = 2.0
    noise: float = 1.0
    scheme: str = "iid"                      # iid | rare
    rare_classes: tuple[int, ...] = (0, 1)
    rare_holder: int = 1
    attacks: dict[int, AttackSpec] = field(default_factory=dict)
    dropouts: dict[int, tuple[int, ...]] = field(default_factory=dict)
    gamma: float = 0.3
    aggregation_mode: str = "weighted"
    quorum: int | None = None
    split: str = "registration"
    participation_fee: int = 100
    pool: int = 10_000
    aggregator_fee: int = 500
    acc_base: str = "1/10"
    acc_target: str = "4/5"
    learning_rate: float = 0.5
    epochs: int = 2
    batch_size: int = 32
    rloo_repetitions: int = 1
    proof_reps: int = 1
    deposit: int | None = None

    def effective_quorum(self) -> int:
        # round-one screening needs three submissions, so the scenario
        # never lets a round proceed with fewer
        if self.quorum is not None:
            return self.quorum
        return max(3, (self.trainers + 1) // 2)

    def validate(self):
        if self.trainers < 3:
            raise ConfigError("scenarios need at least 3 trainers")
        if self.rounds < 1:
            raise ConfigError("scenarios need at least 1 round")
        if self.model not in ("lr", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.scheme not in ("iid", "rare"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "rare" and not 1 <= self.rare_holder <= self.trainers:
            raise ConfigError("rare_holder out of range")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")
        q = self.effective_quorum()
        if not 3 <= q <= self.trainers:
            raise ConfigError("quorum must be in [3, trainers]")
        for tid in self.attacks:
            if not 1 <= tid <= self.trainers:
                raise ConfigError(f"attack names unknown trainer {tid}")
        for rnd, ids in self.dropouts.items():
            if rnd < 1:
                raise ConfigError("dropout round out of range")
            for tid in ids:
                if not 1 <= tid <= self.trainers:
                    raise ConfigError(f"dropout names unknown trainer {tid}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "trainers": self.trainers,
            "rounds": self.rounds,
            "model": self.model,
            "dim": self.dim,
            "classes": self.classes,
            "hidden": self.hidden,
            "samples_per_trainer": self.samples_per_trainer,
            "owner_samples": self.owner_samples,
            "mean_scale": self.mean_scale,
            "noise": self.noise,
            "scheme": self.scheme,
            "rare_classes": list(self.rare_classes),
            "rare_holder": self.rare_holder,
            "attacks": {
                str(t): {"kind": a.kind, "sigma": a.sigma, "beta": a.beta}
                for t, a in sorted(self.attacks.items())
            },
            "dropouts": {
                str(r): list(ids) for r, ids in sorted(self.dropouts.items())
            },
            "gamma": self.gamma,
            "aggregation_mode": self.aggregation_mode,
            "quorum": self.quorum,
            "split": self.split,
            "participation_fee": self.participation_fee,
            "pool": self.pool,
            "aggregator_fee": self.aggregator_fee,
            "acc_base": self.acc_base,
            "acc_target": self.acc_target,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "rloo_repetitions": self.rloo_repetitions,
            "proof_reps": self.proof_reps,
            "deposit": self.deposit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        try:
            if "rare_classes" in kwargs:
                kwargs["rare_classes"] = tuple(int(c) for c in kwargs["rare_classes"])
            if "attacks" in kwargs:
                kwargs["attacks"] = {
                    int(t): AttackSpec(
                        kind=a["kind"],
                        sigma=float(a.get("sigma", 1.0)),
                        beta=float(a.get("beta", 10.0)),
                    )
                    for t, a in kwargs["attacks"].items()
                }
            if "dropouts" in kwargs:
                kwargs["dropouts"] = {
                    int(r): tuple(int(t) for t in ids)
                    for r, ids in kwargs["dropouts"].items()
                }
            config = cls(**kwargs)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        config.validate()
        return config


@dataclass
class RunResult:
    config: ScenarioConfig
    contract: Contract
    store: ContentStore
    report: dict
    events: list[dict]

    def report_bytes(self) -> bytes:
        return canonical_json(self.report) + b"\n"

    def event_lines(self) -> bytes:
        return b"".join(canonical_json(e) + b"\n" for e in self.events)


# -- the event fold -----------------------------------------------------------------


def _blank_round(rnd: int) -> dict:
    return {
        "round": rnd,
        "base_cid": None,
        "submissions": {},
        "deadline": None,
        "aggregate_cid": None,
        "transcripts": {},
        "val_count": None,
        "val_n": None,
        "attack_flagged": None,
        "kept": None,
        "removed": None,
        "report": None,
        "verify_failed": None,
        "verified": False,
    }


def report_from_events(events: list[dict]) -> dict:
    """Fold the contract's event log into the run report.

    Replaying a saved log through this function reproduces the report
    byte for byte; nothing in here consults simulation state.
    """
    out = {
        "digest": None,
        "descriptor": None,
        "owner": None,
        "aggregator": None,
        "deposit": None,
        "trainers": {},
        "validation_cid": None,
        "test_cid": None,
        "rounds": [],
        "final": None,
        "abort_reason": None,
        "payouts": {},
        "aggregator_fee": 0,
        "refund": 0,
        "phase": None,
        "n_events": len(events),
    }
    rounds: dict[int, dict] = {}
    for e in events:
        kind = e["event"]
        if kind == "deploy":
            out["digest"] = e["digest"]
            out["descriptor"] = e["descriptor"]
            out["deposit"] = e["deposit"]
            out["owner"] = e["owner"]
            out["aggregator"] = e["aggregator"]
        elif kind == "register":
            out["trainers"][str(e["trainer"])] = {
                "address": e["address"],
                "n_samples": e["n_samples"],
            }
        elif kind == "split_resolved":
            out["validation_cid"] = e["validation_cid"]
            out["test_cid"] = e["test_cid"]
        elif kind == "training_started":
            r = rounds.setdefault(e["round"], _blank_round(e["round"]))
            r["base_cid"] = e["base_cid"]
        elif kind == "base_posted":
            rounds[e["round"]]["base_cid"] = e["cid"]
        elif kind == "local_submitted":
            rounds[e["round"]]["submissions"][str(e["trainer"])] = e["cid"]
        elif kind in ("submissions_closed", "deadline"):
            rounds[e["round"]]["deadline"] = {
                "submitted": e["submitted"],
                "outcome": e.get("outcome", "advance"),
            }
        elif kind == "round_submitted":
            r = rounds[e["round"]]
            r["aggregate_cid"] = e["aggregate_cid"]
            r["transcripts"] = {
                "outlier": e["outlier_tcid"],
                "aggregation": e["aggregation_tcid"],
                "accuracy": e["accuracy_tcid"],
            }
            r["val_count"] = e["val_count"]
            r["val_n"] = e["val_n"]
        elif kind == "round_verified":
            r = rounds[e["round"]]
            r["kept"] = e["kept"]
            r["removed"] = e["removed"]
            r["attack_flagged"] = e["attack_flagged"]
            r["report"] = e["report"]
            r["verified"] = True
        elif kind == "verify_failed":
            rounds[e["round"]]["verify_failed"] = {
                "stage": e["stage"],
                "detail": e["detail"],
            }
        elif kind == "finalize_accepted":
            out["final"] = {
                "final_count": e["final_count"],
                "final_n": e["final_n"],
                "total_reward": e["total_reward"],
                "alpha": e["alpha"],
                "honest": e["honest"],
                "rewards": e["rewards"],
                "contributions": e["contributions"],
            }
        elif kind == "finalize_rejected":
            out["finalize_rejected"] = {"stage": e["stage"], "detail": e["detail"]}
        elif kind == "reward_spread":
            out["payouts"] = e["payouts"]
            out["aggregator_fee"] = e["aggregator_fee"]
            out["refund"] = e["refund"]
        elif kind == "aborted":
            out["abort_reason"] = e["reason"]
            out["payouts"] = e["payouts"]
            out["refund"] = e["refund"]
        out["phase"] = e["phase"]
    out["rounds"] = [rounds[k] for k in sorted(rounds)]
    return out


# -- tamper helpers ---------------------------------------------------------------


def _tampered_report(report_json: dict) -> dict:
    doc = copy.deepcopy(report_json)
    if doc["removed"]:
        tid = doc["removed"].pop(0)
        doc["kept"] = sorted(doc["kept"] + [tid])
    else:
        doc["attack_flagged"] = not doc["attack_flagged"]
    return doc


def _tampered_aggregate(store: ContentStore, agg: ModelWeights) -> str:
    raws = agg.raws.copy()
    raws[0] += fxp.SCALE
    return store.put(ModelWeights(agg.layout, raws).serialize())


# -- scenario execution --------------------------------------------------------------


def _build_descriptor(config: ScenarioConfig, store: ContentStore, owner_ds: Dataset):
    schedule = RewardSchedule(
        participation_fee=config.participation_fee,
        pool=config.pool,
        aggregator_fee=config.aggregator_fee,
        acc_base=Fraction(config.acc_base),
        acc_target=Fraction(config.acc_target),
    )
    owner_cid = None
    val_cid = test_cid = None
    if config.split == "registration":
        owner_cid = store.put(owner_ds.serialize())
    else:
        seed = _rng(config.seed, _SPLIT).bytes(32)
        val, test = split_owner_data(owner_ds, seed)
        val_cid = store.put(val.serialize())
        test_cid = store.put(test.serialize())
    return TaskDescriptor(
        model_kind=config.model,
        dim=config.dim,
        classes=config.classes,
        hidden=config.hidden,
        rounds=config.rounds,
        min_trainers=config.trainers,
        quorum=config.effective_quorum(),
        gamma_raw=fxp.FixedPoint.from_real(config.gamma).raw,
        aggregation_mode=config.aggregation_mode,
        schedule=schedule,
        split=config.split,
        owner_data_cid=owner_cid,
        validation_cid=val_cid,
        test_cid=test_cid,
        hyperparams={
            "learning_rate": config.learning_rate,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
        },
        rloo_repetitions=config.rloo_repetitions,
    )


def _coalition_proof(contract: Contract, models, coalition, reps):
    desc = contract.descriptor
    entries = [(tid, models[tid]) for tid in sorted(coalition)]
    if desc.aggregation_mode == "weighted":
        weights = [contract.registry[tid].n_samples for tid in sorted(coalition)]
        return prove_aggregation(entries, weights, mode="weighted", reps=reps)
    return prove_aggregation(
        entries, [], mode="predivided", total=desc.min_trainers, reps=reps
    )


def build_finalize(
    contract: Contract, store: ContentStore, test_ds: Dataset, proof_reps: int = 1
) -> FinalizeMessage:
    """Aggregator-side finalize message: measure every sampled coalition
    and package transcripts for each measurement."""
    desc = contract.descriptor
    honest = contract.honest_trainers()
    reps = desc.rloo_repetitions
    final_n = test_ds.n
    entries: list[RlooEntry] = []
    per_round: list[dict[int, Fraction]] = []
    for record in contract.rounds:
        if not record.verified:
            continue
        ids = tuple(t for t in sorted(record.kept) if t in honest)
        if not ids:
            per_round.append({})
            continue
        k = subset_size(len(ids))
        seed = contract.round_seed(record.round)
        models = {
            tid: ModelWeights.deserialize(store.get(record.local_cids[tid]))
            for tid in ids
        }
        base_w = ModelWeights.deserialize(store.get(record.base_cid))
        scores: dict[int, Fraction] = {}
        for trainer in ids:
            total = Fraction(0)
            for rep in range(reps):
                subset = sample_subset(ids, trainer, k, seed, rep)
                with_agg, with_t = _coalition_proof(contract, models, subset, proof_reps)
                with_cnt, with_acc_t = prove_accuracy(with_agg, test_ds, proof_reps)
                without = tuple(t for t in subset if t != trainer)
                if without:
                    wo_agg, wo_t = _coalition_proof(contract, models, without, proof_reps)
                    wo_tcid = store.put(wo_t.serialize())
                else:
                    wo_agg = base_w
                    wo_tcid = None
                wo_cnt, wo_acc_t = prove_accuracy(wo_agg, test_ds, proof_reps)
                entries.append(
                    RlooEntry(
                        round=record.round,
                        trainer=trainer,
                        rep=rep,
                        subset=subset,
                        with_count=with_cnt,
                        without_count=wo_cnt,
                        with_agg_tcid=store.put(with_t.serialize()),
                        with_acc_tcid=store.put(with_acc_t.serialize()),
                        without_agg_tcid=wo_tcid,
                        without_acc_tcid=store.put(wo_acc_t.serialize()),
                    )
                )
                total += Fraction(with_cnt - wo_cnt, final_n)
            scores[trainer] = total / reps
        per_round.append(scores)
    cv = normalize_and_total(per_round)
    final_w = ModelWeights.deserialize(store.get(contract.rounds[-1].aggregate_cid))
    final_count, final_t = prove_accuracy(final_w, test_ds, proof_reps)
    return FinalizeMessage(
        contributions=cv,
        entries=tuple(entries),
        final_count=final_count,
        final_n=final_n,
        final_acc_tcid=store.put(final_t.serialize()),
    )


def _tamper_finalize(msg: FinalizeMessage, kind: str) -> FinalizeMessage:
    """Corrupt a finalize message; returns it unchanged when the run left
    nothing to corrupt (empty honest set)."""
    if kind == "contribution":
        cv = msg.contributions
        if not cv.ids:
            return msg
        totals = dict(cv.totals)
        totals[cv.ids[0]] += Fraction(1, 7)
        cv = dataclasses.replace(cv, totals=totals)
        return dataclasses.replace(msg, contributions=cv)
    if kind == "subset":
        for i, e in enumerate(msg.entries):
            for other in msg.entries:
                if other.subset != e.subset:
                    entries = list(msg.entries)
                    entries[i] = dataclasses.replace(e, subset=other.subset)
                    return dataclasses.replace(msg, entries=tuple(entries))
        if msg.entries:
            entries = list(msg.entries)
            entries[0] = dataclasses.replace(
                entries[0], with_count=entries[0].with_count + 1
            )
            return dataclasses.replace(msg, entries=tuple(entries))
        return msg
    raise ConfigError(f"unknown finalize tamper {kind!r}")


def run(
    config: ScenarioConfig,
    store: ContentStore | None = None,
    tamper: dict | None = None,
) -> RunResult:
    config.validate()
    tamper = tamper or {}
    store = store if store is not None else ContentStore()
    L = config.trainers

    # one draw for everyone: owner and trainers must share cluster geometry
    data_rng = _rng(config.seed, _DATA)
    total = config.owner_samples + L * config.samples_per_trainer
    all_ds = make_blobs(
        total, config.dim, config.classes, data_rng,
        config.mean_scale, config.noise,
    )
    owner_ds = all_ds.subset(np.arange(config.owner_samples))
    pool_ds = all_ds.subset(np.arange(config.owner_samples, total))
    shards = partition(
        pool_ds, config.scheme, L, data_rng,
        rare_classes=config.rare_classes, holder=config.rare_holder - 1,
    )

    descriptor = _build_descriptor(config, store, owner_ds)
    deposit = config.deposit if config.deposit is not None else required_deposit(descriptor)
    contract = Contract.deploy(store, descriptor, "addr:owner", "addr:agg", deposit)
    for tid in range(1, L + 1):
        contract.register(tid, f"addr:t{tid}", f"pk:t{tid}", shards[tid - 1].n)

    val_ds = Dataset.deserialize(store.get(contract.validation_cid))
    test_ds = Dataset.deserialize(store.get(contract.test_cid))

    w0 = init_weights(
        config.model, config.dim, config.classes, config.hidden,
        _rng(config.seed, _INIT),
    )
    contract.post_base(store.put(w0.serialize()))
    tcfg = TrainerConfig(
        model=config.model,
        hidden=config.hidden,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
    )
    gamma = fxp.FixedPoint(descriptor.gamma_raw)
    reps = config.proof_reps

    prev_entries: dict[int, ModelWeights] | None = None
    for rnd in range(1, config.rounds + 1):
        if contract.phase.stage != LOCAL_TRAINING:
            break
        record = contract.rounds[rnd - 1]
        base_w = ModelWeights.deserialize(store.get(record.base_cid))
        absent = set(config.dropouts.get(rnd, ()))
        entries: dict[int, ModelWeights] = {}
        for tid in range(1, L + 1):
            if tid in absent:
                continue
            rng_t = _rng(config.seed, _TRAIN, rnd, tid)
            spec = config.attacks.get(tid)
            if spec is not None:
                w = apply_attack(spec, base_w, shards[tid - 1], tcfg, rng_t)
            else:
                w = train_local(base_w, shards[tid - 1], tcfg, rng_t)
            if config.aggregation_mode == "predivided":
                w = ModelWeights(w.layout, w.raws // L)
            entries[tid] = w
            contract.submit_local(tid, rnd, store.put(w.serialize()))
        if contract.phase.stage == LOCAL_TRAINING:
            contract.close_submissions(rnd)
        if contract.phase.stage == ABORTED:
            break

        # aggregator's turn
        subs = RoundSubmissions(round=rnd, entries=entries, previous=prev_entries)
        if rnd > 1:
            prev_removed = frozenset(contract.rounds[rnd - 2].removed)
            state = DetectorState(prev_removed=prev_removed, benign_avg=base_w)
        else:
            prev_removed = frozenset()
            state = DetectorState(prev_removed=frozenset(), benign_avg=None)
        report = detect(subs, gamma, state)
        if not report.cross_trainer_ran:
            anchor = None
        elif rnd == 1:
            ids = tuple(sorted(entries))
            anchor = krum_average(
                [entries[t] for t in ids], max(1, len(ids) // 2), ids
            )
        else:
            anchor = base_w
        outlier_t = prove_outlier(subs, gamma, prev_removed, report, anchor, reps)
        agg_model, agg_t = _coalition_proof(contract, entries, report.kept, reps)
        val_count, acc_t = prove_accuracy(agg_model, val_ds, reps)

        claimed_report = report.to_json()
        aggregate_cid = store.put(agg_model.serialize())
        claimed_count = val_count
        if tamper.get("round") == rnd:
            if tamper["kind"] == "aggregate":
                aggregate_cid = _tampered_aggregate(store, agg_model)
            elif tamper["kind"] == "report":
                claimed_report = _tampered_report(claimed_report)
            elif tamper["kind"] == "accuracy":
                claimed_count = val_count + 1
        contract.submit_round(
            rnd,
            report_json=claimed_report,
            aggregate_cid=aggregate_cid,
            outlier_tcid=store.put(outlier_t.serialize()),
            aggregation_tcid=store.put(agg_t.serialize()),
            accuracy_tcid=store.put(acc_t.serialize()),
            val_count=claimed_count,
            val_n=val_ds.n,
        )
        contract.verify_round(rnd)
        if contract.phase.stage == ABORTED:
            break
        prev_entries = entries

    if contract.phase.stage == AWAITING_FINALIZE:
        msg = build_finalize(contract, store, test_ds, reps)
        if tamper.get("kind") in ("contribution", "subset"):
            msg = _tamper_finalize(msg, tamper["kind"])
        contract.finalize(msg)
    if contract.phase.stage == REWARD_SPREAD:
        contract.spread_rewards()

    assert contract.tokens_conserved(), "terminal state must conserve tokens"
    return RunResult(
        config=config,
        contract=contract,
        store=store,
        report=report_from_events(contract.events),
        events=list(contract.events),
    )


# -- metrics and randomized scenarios ----------------------------------------------


def detection_metrics(report: dict, malicious: set[int]) -> dict:
    """Detection quality for one run report against known ground truth."""
    verified = [r for r in report["rounds"] if r["verified"]]
    late = [r for r in verified if r["round"] >= 2]
    correct = 0
    for r in late:
        submitters = {int(t) for t in r["submissions"]}
        active = bool(malicious & submitters)
        if bool(r["attack_flagged"]) == active:
            correct += 1
    removed_ever: set[int] = set()
    removal_events = 0
    benign = {int(t) for t in report["trainers"]} - malicious
    for r in verified:
        removed = set(r["removed"])
        removed_ever |= removed
        removal_events += len(removed & benign)
    return {
        "rounds_verified": len(verified),
        "cross_round_accuracy": correct / len(late) if late else 1.0,
        "recall": (
            len(removed_ever & malicious) / len(malicious) if malicious else 1.0
        ),
        "benign_removal_rate": (
            removal_events / (len(benign) * len(verified))
            if benign and verified
            else 0.0
        ),
        "benign_ever_removed": (
            len(removed_ever & benign) / len(benign) if benign else 0.0
        ),
    }


def sweep(config: ScenarioConfig, seeds: list[int]) -> list[dict]:
    """Re-run one scenario across seeds; per-seed metric rows."""
    rows = []
    malicious = set(config.attacks)
    for seed in seeds:
        result = run(dataclasses.replace(config, seed=seed))
        row = {"seed": seed, "phase": result.report["phase"]}
        row.update(detection_metrics(result.report, malicious))
        rows.append(row)
    return rows


def random_scenario(seed: int) -> tuple[ScenarioConfig, dict | None]:
    """Small randomized economy run: mixed attacks, benign dropouts, and
    occasional aggregator tampering. Used for conservation soak tests."""
    rng = _rng(seed, 7)
    trainers = int(rng.integers(4, 7))
    rounds = int(rng.integers(2, 5))
    # one attack kind per run: mixed magnitudes let the largest outlier mask
    # the smaller ones inside a single three-sigma screening
    attacks: dict[int, AttackSpec] = {}
    roll = rng.random()
    if roll < 0.35:
        n_att = 1 if trainers < 6 else int(rng.integers(1, 3))
        kind = "byzantine" if rng.random() < 0.6 else "backdoor"
        picks = rng.choice(np.arange(1, trainers + 1), size=n_att, replace=False)
        for tid in sorted(int(t) for t in picks):
            if kind == "byzantine":
                attacks[tid] = AttackSpec("byzantine", sigma=1.0)
            else:
                attacks[tid] = AttackSpec("backdoor", beta=10.0)
    benign = [t for t in range(1, trainers + 1) if t not in attacks]
    dropouts: dict[int, tuple[int, ...]] = {}
    for rnd in range(2, rounds + 1):
        if benign and rng.random() < 0.25:
            k = int(rng.integers(1, min(2, len(benign)) + 1))
            picks = rng.choice(benign, size=k, replace=False)
            dropouts[rnd] = tuple(int(t) for t in sorted(picks))
    tamper: dict | None = None
    roll = rng.random()
    if roll < 0.08:
        tamper = {"kind": "aggregate", "round": int(rng.integers(1, rounds + 1))}
    elif roll < 0.14:
        tamper = {"kind": "accuracy", "round": int(rng.integers(1, rounds + 1))}
    elif roll < 0.20:
        tamper = {"kind": "report", "round": int(rng.integers(1, rounds + 1))}
    elif roll < 0.24:
        tamper = {"kind": "contribution"}
    config = ScenarioConfig(
        seed=seed,
        trainers=trainers,
        rounds=rounds,
        model="lr",
        dim=8,
        classes=4,
        samples_per_trainer=40,
        owner_samples=240,
        attacks=attacks,
        dropouts=dropouts,
        learning_rate=0.5,
        epochs=1,
        batch_size=16,
        participation_fee=50,
        pool=5_000,
        aggregator_fee=100,
        acc_base="1/8",
        acc_target="3/4",
    )
    return config, tamper
