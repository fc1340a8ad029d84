"""Command-line front end.

Subcommands::

    uptime ingest sessions.csv -o trace.bin
    uptime synth synth.json -o outdir
    uptime eval manifest.json [-o outdir]
    uptime dht manifest.json [-o outdir] [--replay]
    uptime report manifest.json [-o outdir]

Exit codes: 0 success, 3 unparseable input, 4 invalid input or parameters,
5 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

from .evaluation import ProtocolViolation
from .experiment import (
    load_manifest,
    load_trace,
    replay_dht,
    run_dht_study,
    run_eval,
    run_report,
    write_dht_artifacts,
)
from .synth import expected_availability, generate, load_synth_config
from .trace import DEFAULT_EPOCH, SlotSpec, TraceFormatError, availability, ingest_csv

log = logging.getLogger("uptime")

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_RUNTIME = 5


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _slot_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slot-seconds", type=int, default=3600, help="slot width in seconds (default: 3600)")
    p.add_argument(
        "--epoch", type=int, default=DEFAULT_EPOCH, help=f"Monday 00:00 local time as unix seconds (default: {DEFAULT_EPOCH})"
    )
    p.add_argument("--tz-offset", type=int, default=0, help="fixed UTC offset in seconds (default: 0)")


def cmd_ingest(args: argparse.Namespace) -> int:
    spec = SlotSpec(args.epoch, args.slot_seconds, args.tz_offset)
    matrix, report = ingest_csv(args.log, spec)
    for line, reason in report.skipped:
        log.warning("line %d skipped: %s", line, reason)
    if matrix.n_users == 0:
        log.warning("no sessions in %s; writing an empty matrix", args.log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    matrix.save(args.out)
    a_bar = availability(matrix).mean_availability if matrix.n_users and matrix.n_slots else 0.0
    print(f"users={matrix.n_users} slots={matrix.n_slots} mean_availability={a_bar:.6f} skipped={report.n_skipped}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_synth_config(args.config)
    if args.seed is not None:
        config = type(config)(config.archetypes, config.n_users, config.n_weeks, args.seed, config.slot_spec)
    matrix, truth = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix.save(out / "trace.bin")
    truth.save(out / "truth.json")
    a_bar = availability(matrix).mean_availability
    summary = {
        "users": matrix.n_users,
        "slots": matrix.n_slots,
        "mean_availability": a_bar,
        "expected_availability": expected_availability(config),
        "trace_sha256": _sha256(out / "trace.bin"),
        "truth_sha256": _sha256(out / "truth.json"),
    }
    (out / "synth_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(
        f"users={matrix.n_users} slots={matrix.n_slots} mean_availability={a_bar:.6f} "
        f"expected={summary['expected_availability']:.6f}"
    )
    return EXIT_OK


def _manifest(args: argparse.Namespace):
    m = load_manifest(args.manifest, args.out)
    if args.seed is not None:
        m.seed = args.seed
    return m


def cmd_eval(args: argparse.Namespace) -> int:
    m = _manifest(args)
    if args.threshold is not None:
        m.eval["availability_threshold"] = args.threshold
    matrix, _ = load_trace(m)
    report = run_eval(m, matrix)
    for row in report.table():
        print(",".join(row))
    return EXIT_OK


def cmd_dht(args: argparse.Namespace) -> int:
    m = _manifest(args)
    for key, value in (
        ("availability_threshold", args.threshold),
        ("replication_target", args.target),
        ("horizon_hours", args.horizon_hours),
        ("baseline_runs", args.baseline_runs),
    ):
        if value is not None:
            m.dht[key] = value
    matrix, _ = load_trace(m)
    if args.replay:
        same, text = replay_dht(m, matrix)
        sys.stdout.write(text)
        print("replay: " + ("identical" if same else "MISMATCH"))
        return EXIT_OK if same else EXIT_RUNTIME
    study = run_dht_study(m, matrix)
    write_dht_artifacts(study, m.output_dir, matrix.slot_spec.slot_seconds)
    print(f"nodes={len(study.nodes)} mean_availability={study.a_bar:.6f} replication={study.replication_n}")
    sys.stdout.write((m.output_dir / "dht_outcome.csv").read_text())
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    m = _manifest(args)
    if args.clusters is not None:
        m.report["clusters"] = args.clusters
    matrix, _ = load_trace(m)
    info = run_report(m, matrix)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uptime", description="User uptime prediction and DHT placement experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a session CSV into a trace matrix")
    p.add_argument("log", help="CSV with header user_id,start_unix,end_unix")
    p.add_argument("-o", "--out", required=True, help="output matrix file")
    _slot_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic trace and its ground truth")
    p.add_argument("config", help="synthetic trace config (JSON)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("eval", cmd_eval, "MSE of every predictor for each training length"),
        ("dht", cmd_dht, "random vs. optimized identifier placement"),
        ("report", cmd_report, "availability summary and user clusters"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("manifest", help="experiment manifest (JSON)")
        p.add_argument("-o", "--out", default=None, help="override the manifest output directory")
        p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
        p.set_defaults(func=func)
        if name in ("eval", "dht"):
            p.add_argument("--threshold", type=float, default=None, help="minimum training availability (default: 0.17)")
        if name == "dht":
            p.add_argument("--target", type=float, default=None, help="availability target for n (default: 0.99)")
            p.add_argument("--horizon-hours", type=int, default=None, help="prediction horizon |T| (default: 168)")
            p.add_argument("--baseline-runs", type=int, default=None, help="paired random runs (default: 10)")
            p.add_argument("--replay", action="store_true", help="rebuild allocations from the swap log and re-simulate")
        if name == "report":
            p.add_argument("--clusters", type=int, default=None, help="number of k-means clusters (default: 6)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (TraceFormatError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_PARSE
    except (ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (ProtocolViolation, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
