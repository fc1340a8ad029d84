"""Four-quadrant partition of a trace into training/test users x training/test periods.

Quadrants:

    Q1  training users, training period   (train)
    Q2  training users, test period       (fit r, a, b, c)
    Q3  test users,     training period   (retrain)
    Q4  test users,     test period       (score)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import TraceMatrix


@dataclass(frozen=True)
class QuadrantSplit:
    training_users: tuple[str, ...]
    test_users: tuple[str, ...]
    training_period: tuple[int, int]
    test_period: tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "training_users", tuple(self.training_users))
        object.__setattr__(self, "test_users", tuple(self.test_users))
        object.__setattr__(self, "training_period", tuple(int(x) for x in self.training_period))
        object.__setattr__(self, "test_period", tuple(int(x) for x in self.test_period))
        if set(self.training_users) & set(self.test_users):
            raise ValueError("training and test users overlap")
        if self.training_period[1] != self.test_period[0]:
            raise ValueError("training period must end where the test period begins")
        if self.training_period[0] >= self.training_period[1] or self.test_period[0] >= self.test_period[1]:
            raise ValueError("empty period")

    @property
    def test_start(self) -> int:
        return self.test_period[0]

    @property
    def training_len(self) -> int:
        return self.training_period[1] - self.training_period[0]

    @property
    def test_len(self) -> int:
        return self.test_period[1] - self.test_period[0]

    def quadrant(self, matrix: TraceMatrix, q: int) -> TraceMatrix:
        if q not in (1, 2, 3, 4):
            raise ValueError(f"no quadrant {q}")
        users = self.training_users if q in (1, 2) else self.test_users
        period = self.training_period if q in (1, 3) else self.test_period
        return matrix.select(users, period)

    def restrict(self, training_users: Sequence[str], test_users: Sequence[str]) -> "QuadrantSplit":
        """Same periods, narrower user sets (order preserved from this split)."""
        keep_train, keep_test = set(training_users), set(test_users)
        return replace(
            self,
            training_users=tuple(u for u in self.training_users if u in keep_train),
            test_users=tuple(u for u in self.test_users if u in keep_test),
        )

    def to_dict(self) -> dict:
        return {
            "training_users": list(self.training_users),
            "test_users": list(self.test_users),
            "training_period": list(self.training_period),
            "test_period": list(self.test_period),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadrantSplit":
        return cls(
            tuple(d["training_users"]),
            tuple(d["test_users"]),
            tuple(d["training_period"]),
            tuple(d["test_period"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QuadrantSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_split(
    matrix: TraceMatrix,
    test_start: int,
    training_len: int,
    test_len: int,
    user_fraction: float = 0.5,
    seed: int = 0,
    sample_cap: int | None = None,
) -> QuadrantSplit:
    """Randomly bisect users and cut the time axis at ``test_start``.

    ``user_fraction`` of the users (rounded, at least one on each side) go to
    the training group; ``sample_cap`` optionally limits each group's size.
    """
    lo, hi = matrix.slot_range
    if training_len <= 0 or test_len <= 0:
        raise ValueError("training_len and test_len must be positive")
    if test_start - training_len < lo or test_start + test_len > hi:
        raise ValueError(
            f"periods [{test_start - training_len}, {test_start + test_len}) exceed trace [{lo}, {hi})"
        )
    if not 0.0 < user_fraction < 1.0:
        raise ValueError("user_fraction must be in (0, 1)")
    n = matrix.n_users
    if n < 2:
        raise ValueError("need at least 2 users to split")

    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(n * user_fraction)), 1), n - 1)
    train_idx, test_idx = order[:n_train], order[n_train:]
    if sample_cap is not None:
        train_idx, test_idx = train_idx[:sample_cap], test_idx[:sample_cap]
    # keep the matrix's user order inside each group
    users = matrix.users
    return QuadrantSplit(
        training_users=tuple(users[i] for i in np.sort(train_idx)),
        test_users=tuple(users[i] for i in np.sort(test_idx)),
        training_period=(test_start - training_len, test_start),
        test_period=(test_start, test_start + test_len),
    )
