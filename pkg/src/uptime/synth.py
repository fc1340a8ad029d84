"""Synthetic traces drawn from known weekly connectivity profiles.

Each user belongs to one archetype. The user is online in a slot with the
archetype's probability for that weekly column, independently of every other
slot, until a geometrically distributed death day after which the user never
returns. Because the generating probabilities are known, the irreducible
(Bayes) MSE of any predictor is known too.

Per-user randomness comes from ``SeedSequence(seed, spawn_key=(user_index,))``
so a user's row does not depend on how many other users are generated or in
which order.

Config files are JSON::

    {
      "n_users": 1000, "n_weeks": 8, "seed": 7,
      "slot_spec": {"slot_seconds": 3600},
      "archetypes": "default"            # or a list of archetype objects
    }

An archetype object has ``name``, ``weight``, optional ``daily_survival``
(default 1) and exactly one profile form: ``"constant": p``,
``"weekly_profile": [...]`` (one value per weekly slot), or
``"blocks": {"base": p0, "blocks": [{"days": [0, 1], "hours": [9, 17], "p": 0.8}]}``
where days are 0=Monday..6=Sunday and hours a half-open [start, end) range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import SlotSpec, TraceMatrix


@dataclass(frozen=True, eq=False)
class UserArchetype:
    name: str
    weekly_profile: np.ndarray
    population_weight: float
    daily_survival: float = 1.0

    def __post_init__(self) -> None:
        profile = np.array(self.weekly_profile, dtype=np.float64)
        if profile.ndim != 1 or profile.size == 0:
            raise ValueError(f"{self.name}: weekly_profile must be a non-empty vector")
        if profile.min() < 0.0 or profile.max() > 1.0:
            raise ValueError(f"{self.name}: profile values must lie in [0, 1]")
        if not 0.0 < self.daily_survival <= 1.0:
            raise ValueError(f"{self.name}: daily_survival must be in (0, 1]")
        if self.population_weight < 0:
            raise ValueError(f"{self.name}: negative population weight")
        profile.setflags(write=False)
        object.__setattr__(self, "weekly_profile", profile)


def constant_profile(p: float, spec: SlotSpec) -> np.ndarray:
    return np.full(spec.slots_per_week, float(p))


def block_profile(spec: SlotSpec, base: float, blocks: Sequence[dict]) -> np.ndarray:
    """Weekly profile equal to ``base`` except inside day/hour blocks."""
    slots = np.arange(spec.slots_per_week)
    dow = spec.day_of_week(slots)
    hour = (slots * spec.slot_seconds % 86_400) / 3600.0
    profile = np.full(spec.slots_per_week, float(base))
    for b in blocks:
        start, end = b["hours"]
        mask = np.isin(dow, list(b["days"])) & (hour >= start) & (hour < end)
        profile[mask] = float(b["p"])
    return profile


WEEKDAYS = (0, 1, 2, 3, 4)
WEEKEND = (5, 6)
ALL_DAYS = WEEKDAYS + WEEKEND


def default_archetypes(spec: SlotSpec | None = None) -> list[UserArchetype]:
    """Five illustrative behaviour classes: from always-on to sporadic churners.

    The numbers are hand-picked to give a mix of very high, very low and
    strongly periodic users; they are not fitted to any measured trace.
    """
    spec = spec or SlotSpec()
    return [
        UserArchetype("always-on", constant_profile(0.93, spec), 0.15, 0.998),
        UserArchetype(
            "office-hours",
            block_profile(spec, 0.04, [{"days": WEEKDAYS, "hours": (9, 18), "p": 0.85}]),
            0.25,
            0.997,
        ),
        UserArchetype(
            "evening-home",
            block_profile(
                spec,
                0.05,
                [
                    {"days": ALL_DAYS, "hours": (19, 24), "p": 0.8},
                    {"days": WEEKEND, "hours": (10, 19), "p": 0.55},
                ],
            ),
            0.25,
            0.995,
        ),
        UserArchetype(
            "weekend-only",
            block_profile(spec, 0.02, [{"days": WEEKEND, "hours": (9, 23), "p": 0.75}]),
            0.15,
            0.995,
        ),
        UserArchetype("sporadic-churner", constant_profile(0.06, spec), 0.20, 0.97),
    ]


@dataclass(frozen=True)
class SynthConfig:
    archetypes: tuple[UserArchetype, ...]
    n_users: int
    n_weeks: int
    seed: int = 0
    slot_spec: SlotSpec = field(default_factory=SlotSpec)

    def __post_init__(self) -> None:
        object.__setattr__(self, "archetypes", tuple(self.archetypes))
        if self.n_users < 1 or self.n_weeks < 1:
            raise ValueError("n_users and n_weeks must be at least 1")
        if not self.archetypes:
            raise ValueError("at least one archetype is required")
        spw = self.slot_spec.slots_per_week
        self.slot_spec.slots_per_day  # raises unless slots tile a day
        for a in self.archetypes:
            if a.weekly_profile.size != spw:
                raise ValueError(f"{a.name}: profile has {a.weekly_profile.size} slots, week has {spw}")
        total = sum(a.population_weight for a in self.archetypes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"archetype weights sum to {total}, not 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        spec = SlotSpec.from_dict(d.get("slot_spec", {}))
        raw = d.get("archetypes", "default")
        if raw == "default":
            archetypes = default_archetypes(spec)
        else:
            archetypes = [_archetype_from_dict(a, spec) for a in raw]
        return cls(
            archetypes=tuple(archetypes),
            n_users=int(d["n_users"]),
            n_weeks=int(d["n_weeks"]),
            seed=int(d.get("seed", 0)),
            slot_spec=spec,
        )

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_weeks": self.n_weeks,
            "seed": self.seed,
            "slot_spec": self.slot_spec.to_dict(),
            "archetypes": [
                {
                    "name": a.name,
                    "weight": a.population_weight,
                    "daily_survival": a.daily_survival,
                    "weekly_profile": a.weekly_profile.tolist(),
                }
                for a in self.archetypes
            ],
        }


def _archetype_from_dict(d: dict, spec: SlotSpec) -> UserArchetype:
    forms = [k for k in ("constant", "weekly_profile", "blocks") if k in d]
    if len(forms) != 1:
        raise ValueError(f"archetype {d.get('name')!r} needs exactly one profile form, got {forms}")
    if "constant" in d:
        profile = constant_profile(d["constant"], spec)
    elif "weekly_profile" in d:
        profile = np.asarray(d["weekly_profile"], dtype=np.float64)
    else:
        profile = block_profile(spec, d["blocks"].get("base", 0.0), d["blocks"]["blocks"])
    return UserArchetype(
        name=str(d["name"]),
        weekly_profile=profile,
        population_weight=float(d["weight"]),
        daily_survival=float(d.get("daily_survival", 1.0)),
    )


def load_synth_config(path: str | Path) -> SynthConfig:
    return SynthConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """The generating parameters behind a synthetic trace."""

    slot_spec: SlotSpec
    users: tuple[str, ...]
    archetype_names: tuple[str, ...]
    profiles: np.ndarray  # archetypes x slots_per_week
    archetype_of: np.ndarray  # per user
    death_day: np.ndarray  # per user, days survived from slot 0; inf = never dies
    first_slot: int = 0
    n_slots: int = 0

    @property
    def slot_range(self) -> tuple[int, int]:
        return self.first_slot, self.first_slot + self.n_slots

    def death_slot(self) -> np.ndarray:
        return self.first_slot + self.death_day * self.slot_spec.slots_per_day

    def probabilities(self, users: Sequence[str] | None, slots) -> np.ndarray:
        """True online probability per (user, slot), zero from the death day on."""
        idx = self._rows(users)
        slots = np.asarray(slots)
        cols = self.slot_spec.week_column(slots)
        p = self.profiles[self.archetype_of[idx]][:, cols]
        alive = slots[None, :] < self.death_slot()[idx][:, None]
        return np.where(alive, p, 0.0)

    def _rows(self, users: Sequence[str] | None) -> np.ndarray:
        if users is None:
            return np.arange(len(self.users))
        index = {u: i for i, u in enumerate(self.users)}
        return np.array([index[u] for u in users], dtype=np.intp)

    def to_dict(self) -> dict:
        return {
            "slot_spec": self.slot_spec.to_dict(),
            "first_slot": self.first_slot,
            "n_slots": self.n_slots,
            "users": list(self.users),
            "archetype_names": list(self.archetype_names),
            "profiles": self.profiles.tolist(),
            "archetype_of": self.archetype_of.tolist(),
            "death_day": [None if np.isinf(d) else int(d) for d in self.death_day],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            slot_spec=SlotSpec.from_dict(d["slot_spec"]),
            users=tuple(d["users"]),
            archetype_names=tuple(d["archetype_names"]),
            profiles=np.asarray(d["profiles"], dtype=np.float64),
            archetype_of=np.asarray(d["archetype_of"], dtype=np.intp),
            death_day=np.array([np.inf if x is None else float(x) for x in d["death_day"]]),
            first_slot=int(d.get("first_slot", 0)),
            n_slots=int(d.get("n_slots", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def user_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate(config: SynthConfig) -> tuple[TraceMatrix, GroundTruth]:
    spec = config.slot_spec
    spd = spec.slots_per_day
    n_slots = config.n_weeks * spec.slots_per_week
    slots = np.arange(n_slots)
    cols = spec.week_column(slots)

    weights = np.array([a.population_weight for a in config.archetypes])
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    profiles = np.stack([a.weekly_profile for a in config.archetypes])
    survival = np.array([a.daily_survival for a in config.archetypes])

    width = len(str(config.n_users - 1))
    users = tuple(f"u{i:0{width}d}" for i in range(config.n_users))
    cells = np.zeros((config.n_users, n_slots), dtype=np.float64)
    archetype_of = np.zeros(config.n_users, dtype=np.intp)
    death_day = np.full(config.n_users, np.inf)

    for i in range(config.n_users):
        rng = user_rng(config.seed, i)
        a = int(np.searchsorted(cum, rng.random(), side="right"))
        a = min(a, len(config.archetypes) - 1)
        archetype_of[i] = a
        if survival[a] < 1.0:
            # P(death_day >= d) = survival ** d
            death_day[i] = float(rng.geometric(1.0 - survival[a]) - 1)
        online = rng.random(n_slots) < profiles[a, cols]
        if np.isfinite(death_day[i]):
            online[int(death_day[i]) * spd :] = False
        cells[i] = online

    matrix = TraceMatrix(spec, users, cells, 0)
    truth = GroundTruth(
        slot_spec=spec,
        users=users,
        archetype_names=tuple(a.name for a in config.archetypes),
        profiles=profiles,
        archetype_of=archetype_of,
        death_day=death_day,
        n_slots=n_slots,
    )
    return matrix, truth


def bayes_mse(truth: GroundTruth, users: Sequence[str] | None = None, slots=None) -> float:
    """Expected MSE of predicting the true probability: mean of p(1 - p)."""
    if slots is None:
        slots = np.arange(*truth.slot_range)
    p = truth.probabilities(users, slots)
    return float(np.mean(p * (1.0 - p)))


def expected_availability(config: SynthConfig) -> float:
    """Expected mean cell value of a generated trace, from the archetype mix.

    A user is alive on day ``d`` with probability ``survival ** (d + 1)``.
    """
    spec = config.slot_spec
    slots = np.arange(config.n_weeks * spec.slots_per_week)
    cols = spec.week_column(slots)
    day = slots // spec.slots_per_day
    weights = np.array([a.population_weight for a in config.archetypes], dtype=np.float64)
    weights = weights / weights.sum()
    total = 0.0
    for w, a in zip(weights, config.archetypes):
        total += w * float(np.mean(a.weekly_profile[cols] * a.daily_survival ** (day + 1.0)))
    return total
