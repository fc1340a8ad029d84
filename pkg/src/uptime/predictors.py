"""Long-term availability predictors.

A *basis* predictor averages past online fractions over a class of columns:

    flat     one class (every slot)
    weekly   day-of-week x slot-of-day
    daily    slot-of-day
    weekend  slot-of-day, kept separate for Mon-Fri and Sat-Sun

in either the *global* scope (all users pooled) or the *individual* scope (one
user's own row). Two fitted corrections turn a raw estimate ``p`` into the
emitted probability:

* mortality: ``p' = p * r ** days``, where ``r`` is a population-level daily
  survival rate and ``days`` counts (possibly fractional) days since the end
  of training;
* linear calibration: ``p'' = clip(a * p' + b, 0, 1)`` with (a, b) from
  ordinary least squares.

The *combined* (ad-hoc) predictor instead regresses the observations on every
basis's ``p'`` plus an intercept and clips the result.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import DAY, SlotSpec, TraceMatrix

# Singular values below this fraction of the largest are treated as zero by
# the combined least-squares fit (minimum-norm solution on rank deficiency).
LSTSQ_RCOND = 1e-10

PIPELINE_FORMAT = "uptime-pipeline"
PIPELINE_VERSION = 1


class Period(str, enum.Enum):
    FLAT = "flat"
    WEEKLY = "weekly"
    DAILY = "daily"
    WEEKEND = "weekend"


class Scope(str, enum.Enum):
    GLOBAL = "global"
    INDIVIDUAL = "individual"


@dataclass(frozen=True)
class BasisKind:
    period: Period
    scope: Scope

    def __post_init__(self) -> None:
        object.__setattr__(self, "period", Period(self.period))
        object.__setattr__(self, "scope", Scope(self.scope))

    @property
    def name(self) -> str:
        return f"{self.period.value}_{self.scope.value}"

    @classmethod
    def parse(cls, name: str) -> "BasisKind":
        period, _, scope = name.partition("_")
        return cls(Period(period), Scope(scope))

    def __str__(self) -> str:
        return self.name


ALL_KINDS: tuple[BasisKind, ...] = tuple(BasisKind(p, s) for p in Period for s in Scope)
COMBINED_NAME = "adhoc"
UNINFORMED_NAME = "uninformed"


def class_count(period: Period, spec: SlotSpec) -> int:
    if period is Period.FLAT:
        return 1
    if period is Period.WEEKLY:
        return spec.slots_per_week
    if period is Period.DAILY:
        return spec.slots_per_day
    return 2 * spec.slots_per_day


def column_classes(period: Period, spec: SlotSpec, slots) -> np.ndarray:
    """Index of the column class each absolute slot belongs to."""
    slots = np.asarray(slots, dtype=np.int64)
    if period is Period.FLAT:
        return np.zeros(slots.shape, dtype=np.intp)
    if period is Period.WEEKLY:
        return spec.week_column(slots).astype(np.intp)
    if period is Period.DAILY:
        return spec.slot_of_day(slots).astype(np.intp)
    weekend = spec.is_weekend(slots).astype(np.intp)
    return (spec.slot_of_day(slots) + spec.slots_per_day * weekend).astype(np.intp)


@dataclass(frozen=True)
class Prediction:
    p: float
    fallback: bool = False


@dataclass(frozen=True, eq=False)
class PredictionBatch:
    """Predictions for a users x slots grid.

    ``fallback`` marks users that had no individual history and were served
    from the global table; ``clamped`` counts cells moved into [0, 1].
    """

    p: np.ndarray
    fallback: np.ndarray
    clamped: int = 0


@dataclass(frozen=True, eq=False)
class BasisPredictor:
    kind: BasisKind
    slot_spec: SlotSpec
    global_table: np.ndarray
    users: tuple[str, ...] = ()
    individual_table: np.ndarray | None = None
    # table entries with no training observations, filled from coarser estimates
    n_filled: int = 0
    _index: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(self.users)})
        tables = [self.global_table] + ([self.individual_table] if self.individual_table is not None else [])
        for t in tables:
            if t.size and (np.min(t) < 0.0 or np.max(t) > 1.0):
                raise ValueError("basis tables must hold probabilities")

    def raw(self, users: Sequence[str], slots) -> PredictionBatch:
        """Uncorrected estimates for every (user, slot) pair."""
        cls = column_classes(self.kind.period, self.slot_spec, slots)
        users = list(users)
        out = np.empty((len(users), cls.size))
        out[:] = self.global_table[cls]
        fallback = np.zeros(len(users), dtype=bool)
        if self.kind.scope is Scope.INDIVIDUAL:
            rows = np.array([self._index.get(u, -1) for u in users], dtype=np.intp)
            known = rows >= 0
            fallback = ~known
            if known.any():
                out[known] = self.individual_table[rows[known]][:, cls]
        return PredictionBatch(out, fallback)


def _class_sums(view: TraceMatrix, period: Period) -> tuple[np.ndarray, np.ndarray]:
    """Per-user sums of cells in each column class, and slots per class."""
    spec = view.slot_spec
    n_cls = class_count(period, spec)
    cls = column_classes(period, spec, view.slots)
    counts = np.bincount(cls, minlength=n_cls)
    order = np.argsort(cls, kind="stable")
    sorted_cls = cls[order]
    present = np.unique(sorted_cls)
    starts = np.searchsorted(sorted_cls, present)
    sums = np.zeros((view.n_users, n_cls))
    sums[:, present] = np.add.reduceat(view.cells[:, order], starts, axis=1)
    return sums, counts


def train_basis(view: TraceMatrix, kind: BasisKind) -> BasisPredictor:
    """Fit one basis predictor on a training view (users x training slots)."""
    if view.n_users == 0 or view.n_slots == 0:
        raise ValueError("cannot train on an empty view")
    sums, counts = _class_sums(view, kind.period)
    seen = counts > 0
    grand_mean = float(view.cells.mean())
    global_table = np.full(counts.size, grand_mean)
    global_table[seen] = sums[:, seen].sum(axis=0) / (view.n_users * counts[seen])
    n_filled = int((~seen).sum())
    if kind.scope is Scope.GLOBAL:
        return BasisPredictor(kind, view.slot_spec, np.clip(global_table, 0.0, 1.0), n_filled=n_filled)
    individual = np.empty_like(sums)
    individual[:] = global_table
    individual[:, seen] = sums[:, seen] / counts[seen]
    return BasisPredictor(
        kind,
        view.slot_spec,
        np.clip(global_table, 0.0, 1.0),
        view.users,
        np.clip(individual, 0.0, 1.0),
        n_filled=n_filled * view.n_users,
    )


@dataclass(frozen=True)
class MortalityModel:
    """Population-level daily survival ``r`` applied from slot ``t0`` on."""

    r: float
    t0: int
    slot_seconds: int = 3600
    observed_users: int = 0
    dead_users: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"r={self.r} outside (0, 1]")

    def decay(self, slots) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64)
        if np.any(slots < self.t0):
            raise ValueError("mortality decay is only defined for slots >= t0")
        days = (slots - self.t0) * (self.slot_seconds / DAY)
        return np.power(self.r, days)


def survival_rate(dead_fraction: float, observed_days: float, min_r: float = 1e-4) -> float:
    """Daily survival matching ``dead_fraction`` deaths over ``observed_days``."""
    if dead_fraction <= 0.0:
        return 1.0
    if dead_fraction >= 1.0:
        return min_r
    return max(min_r, (1.0 - dead_fraction) ** (1.0 / observed_days))


def estimate_mortality(view: TraceMatrix, grace_days: float = 7, min_r: float = 1e-4) -> MortalityModel:
    """Estimate ``r`` from users that go silent before the end of training.

    A user seen at least once is dead if their last online slot precedes the
    end of the view by more than ``grace_days``. Deaths are detectable during
    the first ``training_days - grace_days`` days, which is the exposure used
    to turn the dead fraction into a daily rate.
    """
    spec = view.slot_spec
    training_days = view.n_slots * spec.slot_seconds / DAY
    if training_days < 2 * grace_days:
        raise ValueError(f"training period of {training_days:g} days is shorter than 2 x grace ({grace_days})")
    end = view.slot_range[1]
    t0 = end
    nonzero = view.cells > 0
    seen = nonzero.any(axis=1)
    n_seen = int(seen.sum())
    if n_seen == 0:
        return MortalityModel(1.0, t0, spec.slot_seconds)
    last = view.first_slot + view.n_slots - 1 - np.argmax(nonzero[:, ::-1], axis=1)
    cutoff = end - grace_days * DAY / spec.slot_seconds
    n_dead = int((seen & (last < cutoff)).sum())
    r = survival_rate(n_dead / n_seen, training_days - grace_days, min_r)
    return MortalityModel(r, t0, spec.slot_seconds, n_seen, n_dead)


def apply_mortality(p: np.ndarray, model: MortalityModel, slots) -> np.ndarray:
    """Scale predictions by ``r ** days``; the last axis of ``p`` runs over ``slots``."""
    return np.asarray(p) * model.decay(slots)


@dataclass(frozen=True)
class LinearCalibration:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("calibration coefficients must be finite")

    def apply(self, p: np.ndarray, clamp: bool = True) -> np.ndarray:
        out = self.a * np.asarray(p) + self.b
        return np.clip(out, 0.0, 1.0) if clamp else out


def fit_calibration(predictions, observations) -> LinearCalibration:
    """OLS of observations on predictions; constant predictions give a=0, b=mean."""
    x = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(observations, dtype=np.float64).ravel()
    if x.size == 0 or x.size != y.size:
        raise ValueError("predictions and observations must be non-empty and aligned")
    if np.ptp(x) == 0.0:
        return LinearCalibration(0.0, float(y.mean()))
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    a = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    return LinearCalibration(a, float(ym - a * xm))


@dataclass(frozen=True)
class CombinedWeights:
    """One coefficient per basis (in ``names`` order) followed by an intercept."""

    names: tuple[str, ...]
    c: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if len(self.c) != len(self.names) + 1:
            raise ValueError("need one coefficient per basis plus an intercept")

    @property
    def intercept(self) -> float:
        return self.c[-1]

    def apply(self, design: np.ndarray, clamp: bool = True) -> np.ndarray:
        """``design`` has the basis predictions on its last axis."""
        out = np.asarray(design) @ np.asarray(self.c[:-1]) + self.c[-1]
        return np.clip(out, 0.0, 1.0) if clamp else out


def fit_combined(design, observations, names: Sequence[str] | None = None) -> CombinedWeights:
    """Least-squares weights for ``observations ~ design @ c + intercept``.

    Rank-deficient designs (e.g. duplicated bases) get the minimum-norm
    solution, with singular values below ``LSTSQ_RCOND`` times the largest
    treated as zero.
    """
    X = np.asarray(design, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    y = np.asarray(observations, dtype=np.float64).ravel()
    if X.shape[0] != y.size or y.size == 0:
        raise ValueError("design and observations must be non-empty and aligned")
    names = tuple(names) if names is not None else tuple(f"b{i}" for i in range(X.shape[1]))
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    c, *_ = np.linalg.lstsq(A, y, rcond=LSTSQ_RCOND)
    return CombinedWeights(names, tuple(c))


def _clamped_count(values: np.ndarray) -> int:
    return int(np.count_nonzero((values < 0.0) | (values > 1.0)))


@dataclass(frozen=True, eq=False)
class BasisPipeline:
    """basis -> mortality -> linear calibration."""

    basis: BasisPredictor
    mortality: MortalityModel
    calibration: LinearCalibration

    @property
    def name(self) -> str:
        return self.basis.kind.name

    def corrected(self, users: Sequence[str], slots) -> PredictionBatch:
        """Mortality-corrected, uncalibrated ``p'``."""
        raw = self.basis.raw(users, slots)
        return PredictionBatch(apply_mortality(raw.p, self.mortality, slots), raw.fallback)

    def predict_matrix(self, users: Sequence[str], slots, clamp: bool = True) -> PredictionBatch:
        pp = self.corrected(users, slots)
        out = self.calibration.apply(pp.p, clamp=False)
        n_clamped = _clamped_count(out)
        return PredictionBatch(np.clip(out, 0.0, 1.0) if clamp else out, pp.fallback, n_clamped)

    def predict(self, user: str, slot: int) -> Prediction:
        batch = self.predict_matrix([user], [slot])
        return Prediction(float(batch.p[0, 0]), bool(batch.fallback[0]))

    def retrain(self, view: TraceMatrix) -> "BasisPipeline":
        """New basis tables from ``view``; fitted r, a, b are kept."""
        return BasisPipeline(train_basis(view, self.basis.kind), self.mortality, self.calibration)


@dataclass(frozen=True, eq=False)
class CombinedPipeline:
    """Least-squares blend of mortality-corrected bases, clipped to [0, 1]."""

    bases: tuple[BasisPredictor, ...]
    mortality: MortalityModel
    weights: CombinedWeights
    name: str = COMBINED_NAME

    def design(self, users: Sequence[str], slots) -> tuple[np.ndarray, np.ndarray]:
        """Stack of ``p'`` per basis on the last axis, plus the fallback mask."""
        decay = self.mortality.decay(slots)
        cols, fallback = [], np.zeros(len(list(users)), dtype=bool)
        for basis in self.bases:
            raw = basis.raw(users, slots)
            cols.append(raw.p * decay)
            fallback |= raw.fallback
        return np.stack(cols, axis=-1), fallback

    def predict_matrix(self, users: Sequence[str], slots, clamp: bool = True) -> PredictionBatch:
        X, fallback = self.design(users, slots)
        out = self.weights.apply(X, clamp=False)
        n_clamped = _clamped_count(out)
        return PredictionBatch(np.clip(out, 0.0, 1.0) if clamp else out, fallback, n_clamped)

    def predict(self, user: str, slot: int) -> Prediction:
        batch = self.predict_matrix([user], [slot])
        return Prediction(float(batch.p[0, 0]), bool(batch.fallback[0]))

    def retrain(self, view: TraceMatrix) -> "CombinedPipeline":
        bases = tuple(train_basis(view, b.kind) for b in self.bases)
        return CombinedPipeline(bases, self.mortality, self.weights, self.name)


@dataclass(frozen=True)
class UninformedPredictor:
    """Always predicts the same probability (0.5 by default)."""

    p: float = 0.5
    name: str = UNINFORMED_NAME

    def predict_matrix(self, users: Sequence[str], slots, clamp: bool = True) -> PredictionBatch:
        n_users, n_slots = len(list(users)), np.asarray(slots).size
        return PredictionBatch(np.full((n_users, n_slots), self.p), np.zeros(n_users, dtype=bool))

    def predict(self, user: str, slot: int) -> Prediction:
        return Prediction(self.p)

    def retrain(self, view: TraceMatrix) -> "UninformedPredictor":
        return self


Pipeline = BasisPipeline | CombinedPipeline | UninformedPredictor


def predict(user: str, slot: int, pipeline: Pipeline) -> Prediction:
    return pipeline.predict(user, slot)


# -- serialization -----------------------------------------------------------


def _basis_to_dict(b: BasisPredictor) -> dict:
    d = {
        "kind": b.kind.name,
        "slot_spec": b.slot_spec.to_dict(),
        "global_table": b.global_table.tolist(),
        "n_filled": b.n_filled,
    }
    if b.individual_table is not None:
        d["users"] = list(b.users)
        d["individual_table"] = b.individual_table.tolist()
    return d


def _basis_from_dict(d: dict) -> BasisPredictor:
    ind = d.get("individual_table")
    return BasisPredictor(
        BasisKind.parse(d["kind"]),
        SlotSpec.from_dict(d["slot_spec"]),
        np.asarray(d["global_table"], dtype=np.float64),
        tuple(d.get("users", ())),
        None if ind is None else np.asarray(ind, dtype=np.float64).reshape(len(d["users"]), -1),
        int(d.get("n_filled", 0)),
    )


def _mortality_to_dict(m: MortalityModel) -> dict:
    return {
        "r": m.r,
        "t0": m.t0,
        "slot_seconds": m.slot_seconds,
        "observed_users": m.observed_users,
        "dead_users": m.dead_users,
    }


def pipeline_to_dict(pipeline: Pipeline) -> dict:
    head = {"format": PIPELINE_FORMAT, "version": PIPELINE_VERSION, "name": pipeline.name}
    if isinstance(pipeline, BasisPipeline):
        return {
            **head,
            "type": "basis",
            "basis": _basis_to_dict(pipeline.basis),
            "mortality": _mortality_to_dict(pipeline.mortality),
            "calibration": {"a": pipeline.calibration.a, "b": pipeline.calibration.b},
        }
    if isinstance(pipeline, CombinedPipeline):
        return {
            **head,
            "type": "combined",
            "bases": [_basis_to_dict(b) for b in pipeline.bases],
            "mortality": _mortality_to_dict(pipeline.mortality),
            "weights": {"names": list(pipeline.weights.names), "c": list(pipeline.weights.c)},
        }
    return {**head, "type": "constant", "p": pipeline.p}


def pipeline_from_dict(d: dict) -> Pipeline:
    if d.get("format") != PIPELINE_FORMAT or d.get("version") != PIPELINE_VERSION:
        raise ValueError(f"unsupported pipeline artifact {d.get('format')!r} v{d.get('version')}")
    kind = d["type"]
    if kind == "constant":
        return UninformedPredictor(float(d["p"]), d.get("name", UNINFORMED_NAME))
    mortality = MortalityModel(**d["mortality"])
    if kind == "basis":
        cal = d["calibration"]
        return BasisPipeline(_basis_from_dict(d["basis"]), mortality, LinearCalibration(cal["a"], cal["b"]))
    if kind == "combined":
        w = d["weights"]
        return CombinedPipeline(
            tuple(_basis_from_dict(b) for b in d["bases"]),
            mortality,
            CombinedWeights(tuple(w["names"]), tuple(w["c"])),
            d.get("name", COMBINED_NAME),
        )
    raise ValueError(f"unknown pipeline type {kind!r}")


def save_pipeline(pipeline: Pipeline, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pipeline_to_dict(pipeline), sort_keys=True) + "\n")


def load_pipeline(path: str | Path) -> Pipeline:
    return pipeline_from_dict(json.loads(Path(path).read_text()))
