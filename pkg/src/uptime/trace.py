"""Connectivity traces: sessions, slotted availability matrices and their statistics.

A trace is a users x time-slots matrix whose cells hold the fraction of the
slot each user spent online. Slot 0 starts at ``SlotSpec.epoch``, which must
fall on a Monday 00:00 in the trace timezone, so the weekly column of any slot
is simply ``slot % slots_per_week``.

Binary matrix layout (little endian)::

    offset 0   8 bytes   magic  b"UPTMTX01"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header, sorted keys:
                         epoch, first_slot, n_slots, slot_seconds,
                         tz_offset, users
    offset 16+H          float64 cells, row-major (users x slots)
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DAY = 86_400
WEEK = 7 * DAY
# 1970-01-05 00:00 UTC, the first Monday after the unix epoch.
DEFAULT_EPOCH = 4 * DAY
MATRIX_MAGIC = b"UPTMTX01"

SESSION_HEADER = ("user_id", "start_unix", "end_unix")


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed at all."""


@dataclass(frozen=True)
class Session:
    user_id: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"session start {self.start} is not before end {self.end}")


@dataclass(frozen=True)
class SlotSpec:
    """Maps unix timestamps onto slot indices.

    Args:
        epoch: Unix time of slot 0. Must be Monday 00:00 local time.
        slot_seconds: Slot duration; must divide one week.
        tz_offset: Fixed offset of the trace timezone, seconds east of UTC.
    """

    epoch: int = DEFAULT_EPOCH
    slot_seconds: int = 3600
    tz_offset: int = 0

    def __post_init__(self) -> None:
        if self.slot_seconds <= 0:
            raise ValueError("slot_seconds must be positive")
        if WEEK % self.slot_seconds:
            raise ValueError(f"slot_seconds={self.slot_seconds} does not divide a week")
        if (self.epoch + self.tz_offset - DEFAULT_EPOCH) % WEEK:
            raise ValueError(f"epoch {self.epoch} is not Monday 00:00 at offset {self.tz_offset}")

    @property
    def slots_per_week(self) -> int:
        return WEEK // self.slot_seconds

    @property
    def slots_per_day(self) -> int:
        if DAY % self.slot_seconds:
            raise ValueError(f"slot_seconds={self.slot_seconds} does not divide a day")
        return DAY // self.slot_seconds

    def slot_of(self, timestamp: int) -> int:
        return (timestamp - self.epoch) // self.slot_seconds

    def slot_start(self, slot: int) -> int:
        return self.epoch + slot * self.slot_seconds

    def week_column(self, slots):
        return np.asarray(slots) % self.slots_per_week

    def day_of_week(self, slots):
        """0 = Monday ... 6 = Sunday."""
        return (np.asarray(slots) * self.slot_seconds // DAY) % 7

    def slot_of_day(self, slots):
        return np.asarray(slots) % self.slots_per_day

    def is_weekend(self, slots):
        return self.day_of_week(slots) >= 5

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "slot_seconds": self.slot_seconds, "tz_offset": self.tz_offset}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotSpec":
        return cls(
            epoch=int(d.get("epoch", DEFAULT_EPOCH)),
            slot_seconds=int(d.get("slot_seconds", 3600)),
            tz_offset=int(d.get("tz_offset", 0)),
        )


@dataclass(frozen=True, eq=False)
class TraceMatrix:
    """Immutable users x slots matrix of online fractions.

    ``cells[i, j]`` belongs to user ``users[i]`` and absolute slot
    ``first_slot + j``.
    """

    slot_spec: SlotSpec
    users: tuple[str, ...]
    cells: np.ndarray
    first_slot: int = 0
    _index: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        cells = np.array(self.cells, dtype=np.float64, copy=True)
        users = tuple(self.users)
        if cells.ndim != 2 and cells.size == 0:
            cells = cells.reshape(len(users), 0)
        if cells.ndim != 2 or cells.shape[0] != len(users):
            raise ValueError(f"cells shape {cells.shape} does not match {len(users)} users")
        if cells.size and (np.isnan(cells).any() or cells.min() < 0.0 or cells.max() > 1.0):
            raise ValueError("cells must lie in [0, 1]")
        if len(set(users)) != len(users):
            raise ValueError("duplicate user ids")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "first_slot", int(self.first_slot))
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(users)})

    @property
    def n_users(self) -> int:
        return self.cells.shape[0]

    @property
    def n_slots(self) -> int:
        return self.cells.shape[1]

    @property
    def slot_range(self) -> tuple[int, int]:
        return self.first_slot, self.first_slot + self.n_slots

    @property
    def slots(self) -> np.ndarray:
        return np.arange(self.first_slot, self.first_slot + self.n_slots)

    def __contains__(self, user: str) -> bool:
        return user in self._index

    def user_index(self, user: str) -> int:
        return self._index[user]

    def user_indices(self, users: Iterable[str]) -> np.ndarray:
        return np.array([self._index[u] for u in users], dtype=np.intp)

    def cell(self, user: str, slot: int) -> float:
        return float(self.cells[self._index[user], slot - self.first_slot])

    def select(
        self,
        users: Sequence[str] | None = None,
        window: tuple[int, int] | None = None,
    ) -> "TraceMatrix":
        """Return the sub-matrix for ``users`` over the slot ``window``."""
        start, stop = window if window is not None else self.slot_range
        lo, hi = self.slot_range
        if not (lo <= start <= stop <= hi):
            raise ValueError(f"window [{start}, {stop}) outside slot range [{lo}, {hi})")
        cols = slice(start - self.first_slot, stop - self.first_slot)
        if users is None:
            return TraceMatrix(self.slot_spec, self.users, self.cells[:, cols], start)
        rows = self.user_indices(users)
        return TraceMatrix(self.slot_spec, tuple(users), self.cells[rows, cols], start)

    def equals(self, other: "TraceMatrix") -> bool:
        return (
            self.slot_spec == other.slot_spec
            and self.users == other.users
            and self.first_slot == other.first_slot
            and self.cells.shape == other.cells.shape
            and self.cells.tobytes() == other.cells.tobytes()
        )

    def to_bytes(self) -> bytes:
        header = {
            **self.slot_spec.to_dict(),
            "first_slot": self.first_slot,
            "n_slots": self.n_slots,
            "users": list(self.users),
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = np.ascontiguousarray(self.cells, dtype="<f8").tobytes()
        return MATRIX_MAGIC + struct.pack("<Q", len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "TraceMatrix":
        if data[:8] != MATRIX_MAGIC:
            raise TraceFormatError("not a trace matrix artifact (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        users = tuple(header["users"])
        n_slots = int(header["n_slots"])
        body = np.frombuffer(data[16 + hlen :], dtype="<f8")
        if body.size != len(users) * n_slots:
            raise TraceFormatError("matrix body length does not match header")
        return cls(
            SlotSpec.from_dict(header),
            users,
            body.reshape(len(users), n_slots),
            int(header["first_slot"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TraceMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of half-open intervals, sorted and non-overlapping."""
    merged: list[list[int]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged]


def ingest_sessions(
    sessions: Iterable[Session],
    spec: SlotSpec,
    slot_range: tuple[int, int] | None = None,
) -> TraceMatrix:
    """Slot a stream of sessions into a :class:`TraceMatrix`.

    Overlapping sessions of one user are unioned first, so no cell exceeds 1.
    Users are ordered by id. Without an explicit ``slot_range`` the matrix
    spans the smallest slot range covering every session.
    """
    by_user: dict[str, list[tuple[int, int]]] = {}
    for s in sessions:
        if s.start < spec.epoch:
            raise ValueError(f"session of {s.user_id!r} starts before the epoch")
        by_user.setdefault(s.user_id, []).append((s.start, s.end))

    users = tuple(sorted(by_user))
    if not users:
        first, last = slot_range if slot_range is not None else (0, 0)
        return TraceMatrix(spec, (), np.zeros((0, last - first)), first)

    merged = {u: merge_intervals(by_user[u]) for u in users}
    if slot_range is None:
        lo = min(spec.slot_of(iv[0][0]) for iv in merged.values())
        hi = max(-(-(iv[-1][1] - spec.epoch) // spec.slot_seconds) for iv in merged.values())
        slot_range = (lo, hi)
    first, last = slot_range

    width = spec.slot_seconds
    seconds = np.zeros((len(users), last - first), dtype=np.int64)
    for row, user in enumerate(users):
        for start, end in merged[user]:
            # clip to the requested range
            start = max(start, spec.slot_start(first))
            end = min(end, spec.slot_start(last))
            if start >= end:
                continue
            s0 = spec.slot_of(start)
            s1 = spec.slot_of(end - 1)
            if s0 == s1:
                seconds[row, s0 - first] += end - start
                continue
            seconds[row, s0 - first] += spec.slot_start(s0 + 1) - start
            seconds[row, s0 + 1 - first : s1 - first] += width
            seconds[row, s1 - first] += end - spec.slot_start(s1)
    return TraceMatrix(spec, users, seconds / width, first)


@dataclass
class IngestReport:
    n_records: int = 0
    n_sessions: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def read_sessions_csv(path: str | Path, spec: SlotSpec | None = None) -> tuple[list[Session], IngestReport]:
    """Parse a ``user_id,start_unix,end_unix`` session log.

    Bad rows are skipped and recorded with their line number. A missing or
    wrong header is fatal (:class:`TraceFormatError`); an empty file yields
    no sessions.
    """
    report = IngestReport()
    sessions: list[Session] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            logger.warning("%s is empty", path)
            return sessions, report
        if tuple(h.strip() for h in header) != SESSION_HEADER:
            raise TraceFormatError(f"{path}: expected header {','.join(SESSION_HEADER)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            report.n_records += 1
            reason = None
            if len(row) != 3:
                reason = f"expected 3 fields, got {len(row)}"
            else:
                try:
                    user, start, end = row[0].strip(), int(row[1]), int(row[2])
                except ValueError:
                    reason = "non-integer timestamp"
                else:
                    if not user:
                        reason = "empty user_id"
                    elif start >= end:
                        reason = "start >= end"
                    elif spec is not None and start < spec.epoch:
                        reason = "starts before epoch"
            if reason is not None:
                logger.warning("%s:%d: skipped (%s)", path, line, reason)
                report.skipped.append((line, reason))
                continue
            sessions.append(Session(user, start, end))
    report.n_sessions = len(sessions)
    return sessions, report


def ingest_csv(path: str | Path, spec: SlotSpec) -> tuple[TraceMatrix, IngestReport]:
    sessions, report = read_sessions_csv(path, spec)
    return ingest_sessions(sessions, spec), report


@dataclass(frozen=True)
class AvailabilitySummary:
    window: tuple[int, int]
    per_user_availability: dict[str, float]
    mean_availability: float
    last_seen: dict[str, int | None]


def availability(
    matrix: TraceMatrix,
    window: tuple[int, int] | None = None,
    users: Sequence[str] | None = None,
) -> AvailabilitySummary:
    """Per-user mean online fraction over ``window`` and its unweighted mean."""
    window = window if window is not None else matrix.slot_range
    if window[1] <= window[0]:
        raise ValueError("empty window")
    users = list(users) if users is not None else list(matrix.users)
    if not users:
        raise ValueError("empty user subset")
    view = matrix.select(users, window)
    per_user = view.cells.mean(axis=1)
    nonzero = view.cells > 0
    any_on = nonzero.any(axis=1)
    last_col = view.n_slots - 1 - np.argmax(nonzero[:, ::-1], axis=1)
    return AvailabilitySummary(
        window=(int(window[0]), int(window[1])),
        per_user_availability={u: float(a) for u, a in zip(users, per_user)},
        mean_availability=float(per_user.mean()),
        last_seen={
            u: (int(window[0] + c) if on else None) for u, c, on in zip(users, last_col, any_on)
        },
    )


def filter_high_availability(summary: AvailabilitySummary, threshold: float = 0.17) -> list[str]:
    """Users whose availability is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    return [u for u, a in summary.per_user_availability.items() if a > threshold]
