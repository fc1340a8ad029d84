"""Manifest-driven experiments: trace loading, the MSE grid and the DHT study.

A manifest is one JSON file; relative paths resolve against its directory.
Every section is optional except ``trace``::

    {
      "seed": 42,
      "output_dir": "out",
      "trace": {"synth": "synth.json"},      # or {"synth": {...}}, {"log": "x.csv"},
                                             # {"matrix": "trace.bin"}
      "slot": {"slot_seconds": 3600, "epoch": 345600, "tz_offset": 0},
      "split": {"user_fraction": 0.5, "sample_cap": null},
      "eval": {"training_days": [7, 28, 84], "test_start_day": null,
               "test_days": null, "availability_threshold": 0.17,
               "grace_days": 7, "stride": 1, "save_pipelines": false},
      "dht": {"training_days": 28, "fit_days": 7, "horizon_hours": 168,
              "test_days": [7, 30, 60, 120], "replication_target": 0.99,
              "replication_n": null, "n_keys": 10000, "id_space_bits": 32,
              "baseline_runs": 10, "epsilon": 1e-6, "patience": 1000,
              "availability_threshold": 0.17, "predictor": "adhoc",
              "grace_days": 7},
      "report": {"clusters": 6, "window_days": 7}
    }

Seeds: every seeded step uses ``derive_seed(seed, label)``, the first 63 bits
of SHA-256 over ``"<seed>/<label>"``. Labels are ``synth`` (only when an
inline synth config has no seed of its own), ``split``, ``dht`` and
``clusters``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import cluster_users
from .dht import (
    RingAllocation,
    DhtConfig,
    OptimizerConfig,
    PairedOutcome,
    lengths_from_days,
    paired_runs,
    read_swap_log,
    replay_swaps,
    replication_factor,
    simulated_availability,
    unavailability_reduction,
)
from .evaluation import (
    EvalConfig,
    EvalReport,
    QuadrantData,
    _filtered_split,
    fit_phase,
    retrain_phase,
    run_grid,
    run_protocol,
)
from .predictors import ALL_KINDS, save_pipeline
from .split import make_split
from .synth import GroundTruth, SynthConfig, generate
from .trace import DAY, SlotSpec, TraceMatrix, availability, filter_high_availability, ingest_csv


class ManifestError(ValueError):
    """Invalid or inconsistent manifest."""


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class Manifest:
    base_dir: Path
    seed: int
    output_dir: Path
    trace: dict
    slot_spec: SlotSpec
    split: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    dht: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


def load_manifest(path: str | Path, output_dir: str | Path | None = None) -> Manifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    if "trace" not in raw or not isinstance(raw["trace"], dict) or len(raw["trace"]) != 1:
        raise ManifestError("manifest needs a 'trace' section with exactly one of synth/log/matrix")
    base = path.parent
    m = Manifest(
        base_dir=base,
        seed=int(raw.get("seed", 0)),
        output_dir=Path(output_dir) if output_dir is not None else base / raw.get("output_dir", "out"),
        trace=raw["trace"],
        slot_spec=SlotSpec.from_dict(raw.get("slot", {})),
        split=raw.get("split", {}),
        eval=raw.get("eval", {}),
        dht=raw.get("dht", {}),
        report=raw.get("report", {}),
    )
    (kind, ref), = m.trace.items()
    if kind not in ("synth", "log", "matrix"):
        raise ManifestError(f"unknown trace source {kind!r}")
    if isinstance(ref, str) and not m.path(ref).exists():
        raise ManifestError(f"trace {kind} file {m.path(ref)} does not exist")
    return m


def synth_config_for(m: Manifest) -> SynthConfig:
    ref = m.trace["synth"]
    d = json.loads(m.path(ref).read_text()) if isinstance(ref, str) else dict(ref)
    if "seed" not in d:
        d["seed"] = derive_seed(m.seed, "synth")
    d.setdefault("slot_spec", m.slot_spec.to_dict())
    return SynthConfig.from_dict(d)


def load_trace(m: Manifest) -> tuple[TraceMatrix, GroundTruth | None]:
    (kind, ref), = m.trace.items()
    if kind == "matrix":
        return TraceMatrix.load(m.path(ref)), None
    if kind == "log":
        matrix, _ = ingest_csv(m.path(ref), m.slot_spec)
        return matrix, None
    return generate(synth_config_for(m))


# -- eval ------------------------------------------------------------------------


def eval_config_for(m: Manifest, matrix: TraceMatrix) -> EvalConfig:
    e = m.eval
    spd = DAY // matrix.slot_spec.slot_seconds
    start_day = e.get("test_start_day")
    test_days = e.get("test_days")
    return EvalConfig(
        training_lengths=tuple(int(round(d * spd)) for d in e.get("training_days", [7, 28, 84])),
        test_start=None if start_day is None else matrix.first_slot + int(round(start_day * spd)),
        test_len=None if test_days is None else int(round(test_days * spd)),
        availability_threshold=float(e.get("availability_threshold", 0.17)),
        user_fraction=float(m.split.get("user_fraction", 0.5)),
        sample_cap=m.split.get("sample_cap"),
        grace_days=float(e.get("grace_days", 7)),
        stride=int(e.get("stride", 1)),
        seed=derive_seed(m.seed, "split"),
    )


def run_eval(m: Manifest, matrix: TraceMatrix) -> EvalReport:
    config = eval_config_for(m, matrix)
    report = run_grid(matrix, config)
    out = m.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    lo = report.test_period[0]
    for row in report.rows:
        if row.status == "unavailable":
            continue
        split = make_split(
            matrix, lo, row.training_len, report.test_period[1] - lo,
            config.user_fraction, config.seed, config.sample_cap,
        )
        split.save(out / f"split_{row.training_len}.json")
    if m.eval.get("save_pipelines"):
        _save_pipelines(m, matrix, config, report)
    return report


def _save_pipelines(m: Manifest, matrix: TraceMatrix, config: EvalConfig, report: EvalReport) -> None:
    lo, hi = report.test_period
    for row in report.rows:
        if row.status != "ok":
            continue
        split = make_split(matrix, lo, row.training_len, hi - lo, config.user_fraction, config.seed, config.sample_cap)
        kept = _filtered_split(matrix, split, config.availability_threshold)
        result = run_protocol(matrix, kept, config.kinds, config.grace_days, config.stride)
        d = m.output_dir / f"pipelines_{row.training_len}"
        d.mkdir(exist_ok=True)
        for name, p in result.pipelines.items():
            save_pipeline(p, d / f"{name}.json")


# -- dht -------------------------------------------------------------------------


@dataclass
class DhtStudy:
    nodes: tuple[str, ...]
    a_bar: float
    replication_n: int
    test_start: int
    horizon_slots: np.ndarray
    probs: np.ndarray
    config: DhtConfig
    paired: PairedOutcome


def dht_config_for(m: Manifest, matrix: TraceMatrix) -> DhtConfig:
    d = m.dht
    return DhtConfig(
        replication_target=float(d.get("replication_target", 0.99)),
        horizon_slots=int(d.get("horizon_hours", 168)),
        test_lengths=lengths_from_days(d.get("test_days", [7, 30, 60, 120]), matrix.slot_spec.slot_seconds),
        n_keys=int(d.get("n_keys", 10_000)),
        id_space_bits=int(d.get("id_space_bits", 32)),
        baseline_runs=int(d.get("baseline_runs", 10)),
        optimizer=OptimizerConfig(
            epsilon=float(d.get("epsilon", 1e-6)),
            patience=int(d.get("patience", 1000)),
            max_candidates=d.get("max_candidates"),
        ),
    )


def run_dht_study(m: Manifest, matrix: TraceMatrix) -> DhtStudy:
    """Fit predictors on training users, then place the filtered test users on the ring."""
    d = m.dht
    spec = matrix.slot_spec
    spd = DAY // spec.slot_seconds
    config = dht_config_for(m, matrix)
    training_len = int(round(d.get("training_days", 28) * spd))
    fit_len = int(round(d.get("fit_days", 7) * spd))
    start_day = d.get("test_start_day")
    test_start = matrix.first_slot + (training_len if start_day is None else int(round(start_day * spd)))

    split = make_split(
        matrix,
        test_start,
        training_len,
        fit_len,
        float(m.split.get("user_fraction", 0.5)),
        derive_seed(m.seed, "split"),
        m.split.get("sample_cap"),
    )
    threshold = float(d.get("availability_threshold", 0.17))
    keep = [
        filter_high_availability(availability(matrix, split.training_period, users), threshold)
        for users in (split.training_users, split.test_users)
    ]
    kept = split.restrict(*keep)
    if len(kept.test_users) < 2 or not kept.training_users:
        raise ValueError("too few users above the availability threshold for a DHT study")

    data = QuadrantData(matrix, kept)
    fitted = fit_phase(data, ALL_KINDS, float(d.get("grace_days", 7)))
    pipeline = retrain_phase(fitted, data)[d.get("predictor", "adhoc")]

    nodes = kept.test_users
    a_bar = availability(matrix, kept.training_period, nodes).mean_availability
    n = d.get("replication_n") or replication_factor(a_bar, config.replication_target)
    step = max(1, 3600 // spec.slot_seconds)
    horizon = test_start + np.arange(config.horizon_slots) * step
    probs = pipeline.predict_matrix(nodes, horizon).p
    paired = paired_runs(nodes, probs, matrix, test_start, int(n), config, derive_seed(m.seed, "dht"))
    return DhtStudy(tuple(nodes), a_bar, int(n), test_start, horizon, probs, config, paired)


def _outcome_csv(rows: list[dict], slot_seconds: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["test_days", "test_slots", "random", "optimized", "unavailability_reduction"])
    for r in rows:
        w.writerow(
            [
                format(r["test_slots"] * slot_seconds / DAY, ".10g"),
                r["test_slots"],
                format(r["random"], ".10g"),
                format(r["optimized"], ".10g"),
                format(r["unavailability_reduction"], ".10g"),
            ]
        )
    return buf.getvalue()


def write_dht_artifacts(study: DhtStudy, out: Path, slot_seconds: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "dht_outcome.csv").write_text(_outcome_csv(study.paired.rows(), slot_seconds))
    runs = study.paired.runs
    summary = {
        "nodes": len(study.nodes),
        "a_bar": study.a_bar,
        "replication_n": study.replication_n,
        "test_start": study.test_start,
        "horizon_samples": int(study.horizon_slots.size),
        "predicted": {
            "random": float(np.mean([r.random_predicted for r in runs])),
            "optimized": float(np.mean([r.optimized_predicted for r in runs])),
        },
        "runs": [
            {
                "run": r.run,
                "swaps": len(r.optimization.swaps),
                "candidates": r.optimization.n_candidates,
                "random_predicted": r.random_predicted,
                "optimized_predicted": r.optimized_predicted,
                "random_simulated": {str(k): v for k, v in r.random_simulated.items()},
                "optimized_simulated": {str(k): v for k, v in r.optimized_simulated.items()},
            }
            for r in runs
        ],
    }
    (out / "dht_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    allocations = {
        "runs": [
            {"run": r.run, "initial": r.random_allocation.to_dict(), "final": r.optimization.allocation.to_dict()}
            for r in runs
        ]
    }
    (out / "allocations.json").write_text(json.dumps(allocations, sort_keys=True) + "\n")
    with open(out / "swaps.log", "w") as fh:
        fh.write("run\tcandidate\tuser_a\tuser_b\tgain\n")
        for r in runs:
            for s in r.optimization.swaps:
                fh.write(f"{r.run}\t{s.candidate}\t{s.user_a}\t{s.user_b}\t{s.gain!r}\n")


def replay_dht(m: Manifest, matrix: TraceMatrix) -> tuple[bool, str]:
    """Rebuild final allocations from initial ones plus the swap log and re-simulate.

    Returns whether both the allocations and the outcome table match the
    stored artifacts, and the recomputed outcome CSV.
    """
    out = m.output_dir
    allocs = json.loads((out / "allocations.json").read_text())["runs"]
    logs = read_swap_log(out / "swaps.log")
    summary = json.loads((out / "dht_summary.json").read_text())
    config = dht_config_for(m, matrix)
    test_start = int(summary["test_start"])
    same = True
    rand, opt = [], []
    for entry in allocs:
        initial = RingAllocation.from_dict(entry["initial"])
        final = replay_swaps(initial, logs.get(entry["run"], []))
        same &= final.to_dict() == entry["final"]
        rand.append(simulated_availability(initial, matrix, test_start, config.test_lengths, config.sample_seconds))
        opt.append(simulated_availability(final, matrix, test_start, config.test_lengths, config.sample_seconds))
    rows = []
    for L in rand[0]:
        r = float(np.mean([x[L] for x in rand]))
        o = float(np.mean([x[L] for x in opt]))
        rows.append({"test_slots": L, "random": r, "optimized": o, "unavailability_reduction": unavailability_reduction(o, r)})
    text = _outcome_csv(rows, matrix.slot_spec.slot_seconds)
    same &= text == (out / "dht_outcome.csv").read_text()
    return same, text


# -- report ------------------------------------------------------------------


def run_report(m: Manifest, matrix: TraceMatrix) -> dict:
    """Availability summary plus clustered per-slot online counts."""
    out = m.output_dir
    out.mkdir(parents=True, exist_ok=True)
    spd = DAY // matrix.slot_spec.slot_seconds
    r = m.report
    summary = availability(matrix)
    values = np.array(list(summary.per_user_availability.values()))
    threshold = float(r.get("availability_threshold", 0.17))
    info = {
        "users": matrix.n_users,
        "slots": matrix.n_slots,
        "slot_range": list(matrix.slot_range),
        "mean_availability": summary.mean_availability,
        "availability_quantiles": {
            str(q): float(np.quantile(values, q)) for q in (0.1, 0.25, 0.5, 0.75, 0.9)
        },
        "high_availability_users": len(filter_high_availability(summary, threshold)),
        "availability_threshold": threshold,
    }
    k = int(r.get("clusters", 6))
    window_days = r.get("window_days", 7)
    lo = matrix.first_slot
    hi = min(matrix.slot_range[1], lo + int(round(window_days * spd)))
    view = matrix.select(None, (lo, hi))
    if matrix.n_users >= k:
        clusters = cluster_users(view, k, derive_seed(m.seed, "clusters"))
        (out / "clusters.csv").write_text(clusters.plot_csv())
        info["cluster_sizes"] = clusters.sizes().tolist()
        info["cluster_mean_availability"] = [float(x) for x in clusters.centroids.mean(axis=1)]
    # per-slot online users, overall and for users above four hours a day
    daily = matrix.cells.mean(axis=1) * 24
    heavy = daily > 4
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", "online_users", "online_high_availability"])
    online = view.cells > 0
    heavy_rows = heavy[[matrix.user_index(u) for u in view.users]]
    for j in range(view.n_slots):
        w.writerow([lo + j, int(online[:, j].sum()), int(online[heavy_rows, j].sum())])
    (out / "online_counts.csv").write_text(buf.getvalue())
    (out / "summary.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
    return info
