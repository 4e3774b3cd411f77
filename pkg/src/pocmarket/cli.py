"""Command line front end.

    pocmarket run --config cfg.json --out results/ [--seed N] [--transcripts]
    pocmarket verify-transcript file.poct [more.poct ...]
    pocmarket replay --events events.jsonl --report report.json
    pocmarket sweep --config cfg.json --seeds 1,2,3,4,5

Exit codes: 0 success, 2 bad config or usage, 3 verification or replay
failure, 4 missing file or other I/O trouble.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from pocmarket.errors import ConfigError, PocmarketError, VerifyFail
from pocmarket.orchestrator import (
    ScenarioConfig,
    report_from_events,
    run,
    sweep,
)
from pocmarket.verify import (
    KIND_ACCURACY,
    KIND_AGGREGATION,
    KIND_MATMUL,
    KIND_OUTLIER,
    ProofTranscript,
    canonical_json,
    verify_accuracy,
    verify_aggregation,
    verify_matmul,
    verify_outlier,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4


def _load_config(path: str) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_json(obj)


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
        config.validate()
    result = run(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_bytes(result.report_bytes())
    (out / "events.jsonl").write_bytes(result.event_lines())
    if args.transcripts:
        tdir = out / "transcripts"
        tdir.mkdir(exist_ok=True)
        for rnd in result.report["rounds"]:
            for role, cid in rnd["transcripts"].items():
                if cid and result.store.has(cid):
                    path = tdir / f"round-{rnd['round']}-{role}.poct"
                    path.write_bytes(result.store.get(cid))
    report = result.report
    print(f"phase: {report['phase']}")
    if report["abort_reason"]:
        print(f"aborted: {report['abort_reason']}")
    for rnd in report["rounds"]:
        if rnd["verified"]:
            print(
                f"round {rnd['round']}: flagged={rnd['attack_flagged']} "
                f"removed={rnd['removed']} val={rnd['val_count']}/{rnd['val_n']}"
            )
        elif rnd["verify_failed"]:
            print(f"round {rnd['round']}: verify failed at {rnd['verify_failed']['stage']}")
    if report["final"]:
        print(
            f"final: {report['final']['final_count']}/{report['final']['final_n']} "
            f"reward={report['final']['total_reward']}"
        )
    if report["payouts"]:
        for addr, amount in sorted(report["payouts"].items()):
            print(f"payout {addr}: {amount}")
    print(f"wrote {out / 'report.json'} and {out / 'events.jsonl'}")
    return EXIT_OK


_VERIFIERS = {
    KIND_MATMUL: verify_matmul,
    KIND_AGGREGATION: verify_aggregation,
    KIND_ACCURACY: verify_accuracy,
    KIND_OUTLIER: verify_outlier,
}


def _cmd_verify_transcript(args) -> int:
    code = EXIT_OK
    for name in args.files:
        blob = Path(name).read_bytes()
        try:
            t = ProofTranscript.parse(blob)
            checker = _VERIFIERS.get(t.kind)
            if checker is None:
                raise VerifyFail("malformed", f"no verifier for kind {t.kind!r}")
            checker(t)
        except VerifyFail as exc:
            print(f"FAIL {name}: {exc.stage}: {exc.detail}")
            code = EXIT_VERIFY
        else:
            print(f"OK   {name}: {t.kind}")
    return code


def _cmd_replay(args) -> int:
    lines = Path(args.events).read_text().splitlines()
    events = [json.loads(line) for line in lines if line.strip()]
    rebuilt = canonical_json(report_from_events(events)) + b"\n"
    recorded = Path(args.report).read_bytes()
    if rebuilt == recorded:
        print(f"replay matches {args.report} ({len(events)} events)")
        return EXIT_OK
    print("replay MISMATCH: report does not reproduce from the event log")
    return EXIT_VERIFY


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    rows = sweep(config, seeds)
    for row in rows:
        print(canonical_json(row).decode())
    if args.out:
        Path(args.out).write_bytes(
            b"".join(canonical_json(r) + b"\n" for r in rows)
        )
    ok = sum(1 for r in rows if r["cross_round_accuracy"] == 1.0)
    print(f"# seeds with perfect cross-round flagging: {ok}/{len(rows)}")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pocmarket")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("run", help="simulate one marketplace task end to end")
    q.add_argument("--config", required=True, help="scenario config JSON")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int, default=None, help="override config seed")
    q.add_argument(
        "--transcripts", action="store_true",
        help="also dump each round's proof transcripts",
    )
    q.set_defaults(func=_cmd_run)

    q = sub.add_parser("verify-transcript", help="check proof transcript files")
    q.add_argument("files", nargs="+", help="transcript files (.poct)")
    q.set_defaults(func=_cmd_verify_transcript)

    q = sub.add_parser("replay", help="recompute a report from its event log")
    q.add_argument("--events", required=True, help="events.jsonl from a run")
    q.add_argument("--report", required=True, help="report.json to compare against")
    q.set_defaults(func=_cmd_replay)

    q = sub.add_parser("sweep", help="rerun a scenario across seeds")
    q.add_argument("--config", required=True, help="scenario config JSON")
    q.add_argument("--seeds", required=True, help="comma separated seed list")
    q.add_argument("--out", default=None, help="write per-seed metrics JSONL here")
    q.set_defaults(func=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VerifyFail as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except PocmarketError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
