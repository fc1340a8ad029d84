"""Scoring predictors: MSE, the four-phase train/fit/retrain/score protocol and the
training-length grid.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .predictors import (
    ALL_KINDS,
    COMBINED_NAME,
    UNINFORMED_NAME,
    BasisKind,
    BasisPipeline,
    CombinedPipeline,
    MortalityModel,
    Pipeline,
    UninformedPredictor,
    estimate_mortality,
    fit_calibration,
    fit_combined,
    train_basis,
)
from .split import QuadrantSplit, make_split
from .trace import DAY, TraceMatrix, availability, filter_high_availability

logger = logging.getLogger(__name__)


def cell_errors(predictions, observations) -> np.ndarray:
    """Expected squared error per cell for an observed online fraction ``x``.

    ``x * (1 - p)**2 + (1 - x) * p**2``; for ``x`` in {0, 1} this is the
    plain squared error of the online/offline outcome.
    """
    p = np.asarray(predictions, dtype=np.float64)
    x = np.asarray(observations, dtype=np.float64)
    if p.shape != x.shape:
        raise ValueError(f"prediction shape {p.shape} != observation shape {x.shape}")
    return x * (1.0 - p) ** 2 + (1.0 - x) * p**2


def mse(predictions, observations) -> float:
    """Mean of :func:`cell_errors`.

    The errors are sorted before summation, so the result does not depend on
    the order in which users or slots are laid out.
    """
    err = cell_errors(predictions, observations)
    if err.size == 0:
        raise ValueError("empty evaluation set")
    return float(np.sort(err, axis=None).sum() / err.size)


class ProtocolViolation(RuntimeError):
    """Raised when scoring observations are read before the scoring phase."""


class QuadrantData:
    """Gatekeeper for quadrant views.

    Q4 (test users in the test period) stays locked until :meth:`unlock_scoring`
    is called; every successful read is appended to ``access_log``.
    """

    def __init__(self, matrix: TraceMatrix, split: QuadrantSplit):
        self._matrix = matrix
        self.split = split
        self.slot_spec = matrix.slot_spec
        self.access_log: list[str] = []
        self._scoring_unlocked = False

    def view(self, q: int) -> TraceMatrix:
        if q == 4 and not self._scoring_unlocked:
            raise ProtocolViolation("Q4 observations requested before the scoring phase")
        self.access_log.append(f"Q{q}")
        return self.split.quadrant(self._matrix, q)

    def unlock_scoring(self) -> None:
        self.access_log.append("unlock")
        self._scoring_unlocked = True

    def test_slots(self, stride: int = 1) -> np.ndarray:
        return np.arange(*self.split.test_period)[::stride]


@dataclass
class FitDiagnostics:
    """MSE on the fitting quadrant (Q2) for each fitted stage."""

    raw: dict[str, float] = field(default_factory=dict)  # mortality-corrected p'
    calibrated: dict[str, float] = field(default_factory=dict)
    combined: float | None = None


@dataclass
class FittedModels:
    mortality: MortalityModel
    pipelines: dict[str, Pipeline]
    diagnostics: FitDiagnostics


def fit_phase(
    data: QuadrantData,
    kinds: Sequence[BasisKind] = ALL_KINDS,
    grace_days: float = 7,
    stride: int = 1,
    combined: bool = True,
) -> FittedModels:
    """Phases 1 and 2: train on Q1, fit r / (a, b) / c on Q2.

    Training periods shorter than twice ``grace_days`` use a grace window of
    half the training period, so week-long training still estimates ``r``.
    """
    q1 = data.view(1)
    bases = [train_basis(q1, k) for k in kinds]
    training_days = q1.n_slots * q1.slot_spec.slot_seconds / DAY
    mortality = estimate_mortality(q1, min(grace_days, training_days / 2))

    q2 = data.view(2)
    slots = q2.slots[::stride]
    obs = q2.cells[:, ::stride]
    decay = mortality.decay(slots)
    diag = FitDiagnostics()
    pipelines: dict[str, Pipeline] = {}
    columns = []
    for basis in bases:
        pp = basis.raw(q2.users, slots).p * decay
        cal = fit_calibration(pp, obs)
        pipelines[basis.kind.name] = BasisPipeline(basis, mortality, cal)
        diag.raw[basis.kind.name] = mse(pp, obs)
        diag.calibrated[basis.kind.name] = mse(cal.apply(pp), obs)
        columns.append(pp)
    if combined and bases:
        design = np.stack(columns, axis=-1)
        weights = fit_combined(design, obs, [k.name for k in kinds])
        pipelines[COMBINED_NAME] = CombinedPipeline(tuple(bases), mortality, weights)
        diag.combined = mse(weights.apply(design), obs)
    return FittedModels(mortality, pipelines, diag)


def retrain_phase(models: FittedModels, data: QuadrantData) -> dict[str, Pipeline]:
    """Phase 3: rebuild every basis table on Q3, keeping the fitted parameters."""
    q3 = data.view(3)
    return {name: p.retrain(q3) for name, p in models.pipelines.items()}


@dataclass
class ScoreResult:
    mse: dict[str, float]
    mse_unclamped: dict[str, float]
    clamp_fraction: dict[str, float]
    fallback_users: dict[str, int]


def score_phase(pipelines: dict[str, Pipeline], data: QuadrantData, stride: int = 1) -> ScoreResult:
    """Phase 4: predict the test period for test users, then compare with Q4."""
    users = data.split.test_users
    slots = data.test_slots(stride)
    batches = {name: (p.predict_matrix(users, slots, clamp=False)) for name, p in pipelines.items()}
    data.unlock_scoring()
    obs = data.view(4).cells[:, ::stride]
    out = ScoreResult({}, {}, {}, {})
    for name, batch in batches.items():
        out.mse[name] = mse(np.clip(batch.p, 0.0, 1.0), obs)
        out.mse_unclamped[name] = mse(batch.p, obs)
        out.clamp_fraction[name] = batch.clamped / batch.p.size
        out.fallback_users[name] = int(batch.fallback.sum())
    return out


@dataclass
class ProtocolResult:
    fitted: FittedModels
    pipelines: dict[str, Pipeline]
    scores: ScoreResult
    access_log: list[str]


def run_protocol(
    matrix: TraceMatrix,
    split: QuadrantSplit,
    kinds: Sequence[BasisKind] = ALL_KINDS,
    grace_days: float = 7,
    stride: int = 1,
    combined: bool = True,
) -> ProtocolResult:
    data = QuadrantData(matrix, split)
    fitted = fit_phase(data, kinds, grace_days, stride, combined)
    pipelines = retrain_phase(fitted, data)
    pipelines[UNINFORMED_NAME] = UninformedPredictor()
    scores = score_phase(pipelines, data, stride)
    return ProtocolResult(fitted, pipelines, scores, list(data.access_log))


# -- training-length grid ----------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    training_lengths: tuple[int, ...]
    test_start: int | None = None
    test_len: int | None = None
    availability_threshold: float = 0.17
    user_fraction: float = 0.5
    sample_cap: int | None = None
    grace_days: float = 7
    stride: int = 1
    seed: int = 0
    kinds: tuple[BasisKind, ...] = ALL_KINDS

    def __post_init__(self) -> None:
        object.__setattr__(self, "training_lengths", tuple(int(x) for x in self.training_lengths))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if not 0.0 <= self.availability_threshold <= 1.0:
            raise ValueError("availability_threshold must be in [0, 1]")
        if not self.training_lengths or min(self.training_lengths) <= 0:
            raise ValueError("training lengths must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def predictor_names(self) -> tuple[str, ...]:
        return tuple(k.name for k in self.kinds) + (COMBINED_NAME,)


@dataclass
class EvalRow:
    training_len: int
    status: str
    n_train_users: int = 0
    n_train_kept: int = 0
    n_test_users: int = 0
    n_test_kept: int = 0
    mse: dict[str, float] = field(default_factory=dict)
    mse_unclamped: dict[str, float] = field(default_factory=dict)
    fit_mse_raw: dict[str, float] = field(default_factory=dict)
    fit_mse_calibrated: dict[str, float] = field(default_factory=dict)
    fit_mse_combined: float | None = None
    clamp_fraction: dict[str, float] = field(default_factory=dict)
    fallback_users: dict[str, int] = field(default_factory=dict)
    mortality_r: float | None = None
    calibration: dict[str, tuple[float, float]] = field(default_factory=dict)
    combined_weights: dict[str, float] = field(default_factory=dict)

    @property
    def uninformed(self) -> float | None:
        return self.mse.get(UNINFORMED_NAME)


def _fmt(x: float | None) -> str:
    return "" if x is None else format(x, ".10g")


@dataclass
class EvalReport:
    slot_seconds: int
    test_period: tuple[int, int]
    predictor_names: tuple[str, ...]
    rows: list[EvalRow]

    def table(self) -> list[list[str]]:
        header = [
            "training_slots",
            "training_days",
            "status",
            "train_users",
            "train_kept",
            "test_users",
            "test_kept",
            UNINFORMED_NAME,
            *self.predictor_names,
        ]
        lines = [header]
        for row in self.rows:
            lines.append(
                [
                    str(row.training_len),
                    _fmt(row.training_len * self.slot_seconds / DAY),
                    row.status,
                    str(row.n_train_users),
                    str(row.n_train_kept),
                    str(row.n_test_users),
                    str(row.n_test_kept),
                    _fmt(row.uninformed),
                    *(_fmt(row.mse.get(n)) for n in self.predictor_names),
                ]
            )
        return lines

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "slot_seconds": self.slot_seconds,
            "test_period": list(self.test_period),
            "predictors": list(self.predictor_names),
            "rows": [
                {
                    "training_len": r.training_len,
                    "status": r.status,
                    "users": {
                        "train": r.n_train_users,
                        "train_kept": r.n_train_kept,
                        "test": r.n_test_users,
                        "test_kept": r.n_test_kept,
                    },
                    "mse": r.mse,
                    "mse_unclamped": r.mse_unclamped,
                    "fit_mse_raw": r.fit_mse_raw,
                    "fit_mse_calibrated": r.fit_mse_calibrated,
                    "fit_mse_combined": r.fit_mse_combined,
                    "clamp_fraction": r.clamp_fraction,
                    "fallback_users": r.fallback_users,
                    "mortality_r": r.mortality_r,
                    "calibration": {k: list(v) for k, v in r.calibration.items()},
                    "combined_weights": r.combined_weights,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _filtered_split(matrix: TraceMatrix, split: QuadrantSplit, threshold: float) -> QuadrantSplit:
    keep = []
    for users in (split.training_users, split.test_users):
        summary = availability(matrix, split.training_period, users)
        keep.append(filter_high_availability(summary, threshold))
    return split.restrict(*keep)


def run_grid(matrix: TraceMatrix, config: EvalConfig) -> EvalReport:
    """Run the four-phase protocol once per training length.

    Without an explicit test period, it starts after the longest training
    length that fits in the trace and runs to the end of the trace; longer
    training lengths are reported as unavailable.
    """
    lo, hi = matrix.slot_range
    if config.test_start is not None:
        test_start = config.test_start
    else:
        # the test period follows the longest training length that leaves room for it
        fitting = [L for L in config.training_lengths if L < hi - lo]
        if not fitting:
            raise ValueError("no training length leaves room for a test period")
        test_start = lo + max(fitting)
    test_len = config.test_len if config.test_len is not None else hi - test_start
    if test_len <= 0 or test_start + test_len > hi or test_start < lo:
        raise ValueError(f"test period [{test_start}, {test_start + test_len}) not inside trace [{lo}, {hi})")

    rows = []
    for length in config.training_lengths:
        if test_start - length < lo:
            logger.warning("training length %d exceeds available history; row skipped", length)
            rows.append(EvalRow(length, "unavailable"))
            continue
        split = make_split(
            matrix, test_start, length, test_len, config.user_fraction, config.seed, config.sample_cap
        )
        kept = _filtered_split(matrix, split, config.availability_threshold)
        row = EvalRow(
            length,
            "ok",
            len(split.training_users),
            len(kept.training_users),
            len(split.test_users),
            len(kept.test_users),
        )
        if not kept.training_users or not kept.test_users:
            row.status = "no-users"
            rows.append(row)
            continue
        result = run_protocol(matrix, kept, config.kinds, config.grace_days, config.stride)
        fitted, scores = result.fitted, result.scores
        row.mse = scores.mse
        row.mse_unclamped = scores.mse_unclamped
        row.clamp_fraction = scores.clamp_fraction
        row.fallback_users = scores.fallback_users
        row.fit_mse_raw = fitted.diagnostics.raw
        row.fit_mse_calibrated = fitted.diagnostics.calibrated
        row.fit_mse_combined = fitted.diagnostics.combined
        row.mortality_r = fitted.mortality.r
        for name, p in fitted.pipelines.items():
            if isinstance(p, BasisPipeline):
                row.calibration[name] = (p.calibration.a, p.calibration.b)
            elif isinstance(p, CombinedPipeline):
                row.combined_weights = dict(zip(p.weights.names + ("intercept",), p.weights.c))
        rows.append(row)
    return EvalReport(
        matrix.slot_spec.slot_seconds,
        (test_start, test_start + test_len),
        config.predictor_names,
        rows,
    )


__all__ = [
    "EvalConfig",
    "EvalReport",
    "EvalRow",
    "FitDiagnostics",
    "FittedModels",
    "ProtocolResult",
    "ProtocolViolation",
    "QuadrantData",
    "cell_errors",
    "fit_phase",
    "mse",
    "retrain_phase",
    "run_grid",
    "run_protocol",
    "score_phase",
]
