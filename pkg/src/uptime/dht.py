"""Availability-aware identifier assignment in a Chord-like ring.

Every key is replicated on the ``replication_n`` nodes whose identifiers are
the closest successors of the key's hash (first ID >= hash, wrapping around).
Because keys falling between the same two consecutive node IDs share one
neighbor set, the ring is handled as ``N`` *ring positions*: neighbor set
``j`` is the nodes at positions ``j, j+1, ..., j+n-1`` (mod N), weighted by the
number of keys whose successor is position ``j``. Swapping two nodes'
identifiers swaps their positions and leaves every set of positions (and every
weight) unchanged, which is what makes swap evaluation local.

Availability of a set of nodes is measured per key: predicted availability
is ``1 - mean_t prod_n (1 - p[n, t])``; simulated availability is the
key-weighted fraction of sets with at least one node online, averaged over
hourly samples.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import DAY, TraceMatrix

logger = logging.getLogger(__name__)


def replication_factor(a_bar: float, target: float = 0.99) -> int:
    """Smallest n >= 1 with ``1 - (1 - a_bar)**n >= target``.

    Both inputs are read as the decimals they print as and the search runs
    in exact rational arithmetic, so boundary cases such as a_bar=0.9,
    target=0.99 (n=2) are not lost to rounding.
    """
    if not 0.0 < a_bar <= 1.0:
        raise ValueError(f"a_bar={a_bar} gives no finite replication factor")
    if not 0.0 < target < 1.0:
        raise ValueError("target must be in (0, 1)")
    miss = 1 - Fraction(repr(float(a_bar)))
    allowed = 1 - Fraction(repr(float(target)))
    n, q = 1, miss
    while q > allowed:
        n += 1
        q *= miss
    return n


@dataclass(frozen=True, eq=False)
class RingAllocation:
    users: tuple[str, ...]
    node_ids: np.ndarray
    keys: np.ndarray
    replication_n: int
    id_space_bits: int = 32

    def __post_init__(self) -> None:
        ids = np.array(self.node_ids, dtype=np.int64)
        keys = np.array(self.keys, dtype=np.int64)
        users = tuple(self.users)
        if ids.shape != (len(users),):
            raise ValueError("one identifier per user required")
        if len(np.unique(ids)) != ids.size:
            raise ValueError("node identifiers must be distinct")
        if not 1 <= self.id_space_bits <= 62:
            raise ValueError("id_space_bits must be in [1, 62]")
        space = 1 << self.id_space_bits
        for arr in (ids, keys):
            if arr.size and (arr.min() < 0 or arr.max() >= space):
                raise ValueError("identifier outside the ring")
        if not 1 <= self.replication_n:
            raise ValueError("replication_n must be positive")
        ids.setflags(write=False)
        keys.setflags(write=False)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "users", users)

    @property
    def n_nodes(self) -> int:
        return len(self.users)

    @property
    def set_size(self) -> int:
        return min(self.replication_n, self.n_nodes)

    def ring_order(self) -> np.ndarray:
        """Node indices sorted by identifier (position -> node)."""
        return np.argsort(self.node_ids, kind="stable")

    def key_positions(self) -> np.ndarray:
        """Ring position of each key's successor node."""
        sorted_ids = np.sort(self.node_ids)
        return np.searchsorted(sorted_ids, self.keys, side="left") % self.n_nodes

    def set_weights(self) -> np.ndarray:
        """Number of keys stored on each neighbor set, indexed by start position."""
        return np.bincount(self.key_positions(), minlength=self.n_nodes)

    def position_sets(self) -> np.ndarray:
        """N x n array: node indices of the neighbor set starting at each position."""
        order = self.ring_order()
        offs = (np.arange(self.n_nodes)[:, None] + np.arange(self.set_size)[None, :]) % self.n_nodes
        return order[offs]

    def neighbor_set(self, key: int) -> list[str]:
        pos = int(np.searchsorted(np.sort(self.node_ids), key, side="left") % self.n_nodes)
        return [self.users[i] for i in self.position_sets()[pos]]

    def neighbor_sets(self) -> np.ndarray:
        """K x n node indices, one row per key."""
        return self.position_sets()[self.key_positions()]

    def swapped(self, a: int, b: int) -> "RingAllocation":
        ids = self.node_ids.copy()
        ids[a], ids[b] = ids[b], ids[a]
        return RingAllocation(self.users, ids, self.keys, self.replication_n, self.id_space_bits)

    def with_ids(self, node_ids: np.ndarray) -> "RingAllocation":
        return RingAllocation(self.users, node_ids, self.keys, self.replication_n, self.id_space_bits)

    def to_dict(self) -> dict:
        return {
            "id_space_bits": self.id_space_bits,
            "replication_n": self.replication_n,
            "users": list(self.users),
            "node_ids": self.node_ids.tolist(),
            "keys": self.keys.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RingAllocation":
        return cls(
            tuple(d["users"]),
            np.asarray(d["node_ids"], dtype=np.int64),
            np.asarray(d["keys"], dtype=np.int64),
            int(d["replication_n"]),
            int(d["id_space_bits"]),
        )


def random_ids(n: int, id_space_bits: int, rng: np.random.Generator) -> np.ndarray:
    space = 1 << id_space_bits
    if n > space:
        raise ValueError("more nodes than identifiers")
    ids = rng.integers(0, space, size=n, dtype=np.int64)
    while len(np.unique(ids)) < n:
        _, first = np.unique(ids, return_index=True)
        dup = np.setdiff1d(np.arange(n), first)
        ids[dup] = rng.integers(0, space, size=dup.size, dtype=np.int64)
    return ids


def random_keys(n_keys: int, id_space_bits: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 1 << id_space_bits, size=n_keys, dtype=np.int64)


def random_allocation(
    users: Sequence[str],
    replication_n: int,
    seed: int,
    keys: np.ndarray | None = None,
    n_keys: int = 10_000,
    id_space_bits: int = 32,
) -> RingAllocation:
    """Uniformly random node identifiers; keys are drawn from ``seed`` unless given."""
    rng = np.random.default_rng(seed)
    ids = random_ids(len(users), id_space_bits, rng)
    if keys is None:
        keys = rng.integers(0, 1 << id_space_bits, size=n_keys, dtype=np.int64)
    return RingAllocation(tuple(users), ids, keys, replication_n, id_space_bits)


def _set_unavailability(Q: np.ndarray, sets: np.ndarray) -> np.ndarray:
    """Per set and sample: probability every member is offline."""
    return np.prod(Q[sets], axis=1)


def predicted_data_availability(alloc: RingAllocation, probs: np.ndarray) -> tuple[np.ndarray, float]:
    """Predicted availability of every key and the mean over keys.

    ``probs[i, t]`` is the online probability of ``alloc.users[i]`` at sample t.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != alloc.n_nodes or probs.shape[1] == 0:
        raise ValueError(f"probs must be {alloc.n_nodes} x |T| with |T| >= 1")
    if len(alloc.keys) == 0:
        raise ValueError("no keys")
    per_set = 1.0 - _set_unavailability(1.0 - probs, alloc.position_sets()).mean(axis=1)
    per_key = per_set[alloc.key_positions()]
    return per_key, float(per_key.mean())


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 1e-6
    patience: int = 1000
    seed: int = 0
    max_candidates: int | None = None


@dataclass(frozen=True)
class SwapRecord:
    candidate: int
    user_a: str
    user_b: str
    gain: float


@dataclass
class OptimizationResult:
    initial: RingAllocation
    allocation: RingAllocation
    swaps: list[SwapRecord]
    n_candidates: int
    initial_availability: float
    final_availability: float


def optimize_ids(alloc: RingAllocation, probs: np.ndarray, config: OptimizerConfig = OptimizerConfig()) -> OptimizationResult:
    """Random-pair identifier swapping.

    Each candidate is a uniformly random pair of distinct nodes. The swap is
    kept iff it raises the key-weighted mean predicted availability of the
    neighbor sets containing either node by more than ``epsilon``. The search
    stops after ``patience`` consecutive rejected candidates.
    """
    N = alloc.n_nodes
    if N < 2:
        raise ValueError("need at least two nodes")
    Q = 1.0 - np.asarray(probs, dtype=np.float64)
    if Q.shape[0] != N:
        raise ValueError("probs rows must match nodes")
    n = alloc.set_size
    rng = np.random.default_rng(config.seed)

    pos_node = alloc.ring_order().copy()
    node_pos = np.empty(N, dtype=np.intp)
    node_pos[pos_node] = np.arange(N)
    weights = alloc.set_weights().astype(np.float64)
    K = weights.sum()
    offs = np.arange(n)
    back = np.arange(n)

    sets = pos_node[(np.arange(N)[:, None] + offs[None, :]) % N]
    avail = 1.0 - _set_unavailability(Q, sets).mean(axis=1)
    total = float(weights @ avail)
    initial = total / K

    ids = alloc.node_ids.copy()
    swaps: list[SwapRecord] = []
    rejected = 0
    candidate = 0
    while rejected < config.patience:
        if config.max_candidates is not None and candidate >= config.max_candidates:
            break
        a = int(rng.integers(N))
        b = int(rng.integers(N - 1))
        b += b >= a
        candidate += 1

        pa, pb = node_pos[a], node_pos[b]
        J = np.unique(np.concatenate([(pa - back) % N, (pb - back) % N]))
        w = weights[J]
        W = float(w.sum())
        if W == 0:
            rejected += 1
            continue
        before = float(w @ avail[J]) / W
        pos_node[pa], pos_node[pb] = b, a
        trial = 1.0 - _set_unavailability(Q, pos_node[(J[:, None] + offs[None, :]) % N]).mean(axis=1)
        gain = float(w @ trial) / W - before
        if gain > config.epsilon:
            node_pos[a], node_pos[b] = pb, pa
            ids[a], ids[b] = ids[b], ids[a]
            new_total = total + float(w @ (trial - avail[J]))
            assert new_total >= total, "accepted swap decreased global availability"
            total = new_total
            avail[J] = trial
            swaps.append(SwapRecord(candidate, alloc.users[a], alloc.users[b], gain))
            rejected = 0
        else:
            pos_node[pa], pos_node[pb] = a, b
            rejected += 1

    final = alloc.with_ids(ids)
    _, final_avail = predicted_data_availability(final, probs)
    return OptimizationResult(alloc, final, swaps, candidate, initial, final_avail)


def replay_swaps(alloc: RingAllocation, swaps: Sequence[SwapRecord]) -> RingAllocation:
    index = {u: i for i, u in enumerate(alloc.users)}
    ids = alloc.node_ids.copy()
    for s in swaps:
        a, b = index[s.user_a], index[s.user_b]
        ids[a], ids[b] = ids[b], ids[a]
    return alloc.with_ids(ids)


def write_swap_log(path: str | Path, swaps: Sequence[SwapRecord], run: int | None = None) -> None:
    """Tab-separated ``[run] candidate user_a user_b gain`` lines."""
    with open(path, "w") as fh:
        fh.write(("run\t" if run is not None else "") + "candidate\tuser_a\tuser_b\tgain\n")
        for s in swaps:
            prefix = f"{run}\t" if run is not None else ""
            fh.write(f"{prefix}{s.candidate}\t{s.user_a}\t{s.user_b}\t{s.gain!r}\n")


def read_swap_log(path: str | Path) -> dict[int | None, list[SwapRecord]]:
    out: dict[int | None, list[SwapRecord]] = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        has_run = header[0] == "run"
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            run = int(parts.pop(0)) if has_run else None
            out.setdefault(run, []).append(SwapRecord(int(parts[0]), parts[1], parts[2], float(parts[3])))
    return out


# -- simulation ----------------------------------------------------------------


def online_samples(
    matrix: TraceMatrix,
    users: Sequence[str],
    start: int,
    n_samples: int,
    sample_seconds: int = 3600,
) -> np.ndarray:
    """users x samples booleans: any uptime during each sample interval."""
    slot = matrix.slot_spec.slot_seconds
    if sample_seconds % slot:
        raise ValueError(f"sample interval {sample_seconds}s is not a multiple of the {slot}s slot")
    per = sample_seconds // slot
    view = matrix.select(users, (start, start + n_samples * per))
    return (view.cells.reshape(len(users), n_samples, per) > 0).any(axis=2)


def simulated_availability(
    alloc: RingAllocation,
    matrix: TraceMatrix,
    test_start: int,
    test_lengths: Sequence[int],
    sample_seconds: int = 3600,
) -> dict[int, float]:
    """Key-weighted fraction of neighbor sets with an online node, per test length.

    ``test_lengths`` are in slots. Lengths running past the end of the trace
    are truncated with a warning.
    """
    slot = matrix.slot_spec.slot_seconds
    if sample_seconds < slot or sample_seconds % slot:
        raise ValueError(f"sample interval {sample_seconds}s is not a multiple of the {slot}s slot")
    per = sample_seconds // slot
    available = (matrix.slot_range[1] - test_start) // per
    wanted = max(int(math.ceil(L / per)) for L in test_lengths)
    n_samples = min(wanted, available)
    if n_samples < wanted:
        warnings.warn(f"test window truncated to {n_samples} samples; trace ends at slot {matrix.slot_range[1]}")
    if n_samples <= 0:
        raise ValueError("no test samples inside the trace")

    online = online_samples(matrix, alloc.users, test_start, n_samples, sample_seconds)
    sets = alloc.position_sets()
    set_online = online[sets].any(axis=1)  # positions x samples
    weights = alloc.set_weights().astype(np.float64)
    per_sample = weights @ set_online / weights.sum()
    csum = np.cumsum(per_sample)
    out = {}
    for L in test_lengths:
        m = min(int(math.ceil(L / per)), n_samples)
        out[int(L)] = float(csum[m - 1] / m)
    return out


def unavailability_reduction(a_opt: float, a_rand: float) -> float:
    """``1 - (1 - a_opt) / (1 - a_rand)``; 0 when the baseline is never unavailable."""
    if a_rand >= 1.0:
        return 0.0
    return 1.0 - (1.0 - a_opt) / (1.0 - a_rand)


@dataclass
class AvailabilityOutcome:
    predicted_availability: float | None
    simulated: dict[int, float]
    baseline: dict[int, float]
    unavailability_reduction: dict[int, float]


def simulate_availability(
    alloc: RingAllocation,
    matrix: TraceMatrix,
    test_start: int,
    test_lengths: Sequence[int],
    baseline_runs: int = 10,
    seed: int = 0,
    probs: np.ndarray | None = None,
    sample_seconds: int = 3600,
) -> AvailabilityOutcome:
    """Simulated availability of ``alloc`` against random re-allocations.

    The baseline keeps the keys and draws fresh node identifiers for each of
    ``baseline_runs`` runs; its availability is the mean across runs.
    """
    sim = simulated_availability(alloc, matrix, test_start, test_lengths, sample_seconds)
    seeds = np.random.SeedSequence(seed).generate_state(baseline_runs)
    base_runs = []
    for s in seeds:
        ids = random_ids(alloc.n_nodes, alloc.id_space_bits, np.random.default_rng(int(s)))
        base_runs.append(simulated_availability(alloc.with_ids(ids), matrix, test_start, test_lengths, sample_seconds))
    base = {L: float(np.mean([r[L] for r in base_runs])) for L in sim}
    predicted = None if probs is None else predicted_data_availability(alloc, probs)[1]
    return AvailabilityOutcome(
        predicted,
        sim,
        base,
        {L: unavailability_reduction(sim[L], base[L]) for L in sim},
    )


@dataclass(frozen=True)
class DhtConfig:
    replication_target: float = 0.99
    horizon_slots: int = 168
    test_lengths: tuple[int, ...] = (7 * 24, 30 * 24, 60 * 24, 120 * 24)
    n_keys: int = 10_000
    id_space_bits: int = 32
    baseline_runs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sample_seconds: int = 3600

    def __post_init__(self) -> None:
        if not 0.0 < self.replication_target < 1.0:
            raise ValueError("replication_target must be in (0, 1)")
        if self.horizon_slots < 1:
            raise ValueError("the prediction horizon needs at least one sample")
        object.__setattr__(self, "test_lengths", tuple(int(x) for x in self.test_lengths))


@dataclass
class PairedRun:
    run: int
    random_allocation: RingAllocation
    optimization: OptimizationResult
    random_predicted: float
    optimized_predicted: float
    random_simulated: dict[int, float]
    optimized_simulated: dict[int, float]


@dataclass
class PairedOutcome:
    runs: list[PairedRun]
    outcome: AvailabilityOutcome

    def rows(self) -> list[dict]:
        return [
            {
                "test_slots": L,
                "random": self.outcome.baseline[L],
                "optimized": self.outcome.simulated[L],
                "unavailability_reduction": self.outcome.unavailability_reduction[L],
            }
            for L in self.outcome.simulated
        ]


def paired_runs(
    users: Sequence[str],
    probs: np.ndarray,
    matrix: TraceMatrix,
    test_start: int,
    replication_n: int,
    config: DhtConfig,
    seed: int = 0,
) -> PairedOutcome:
    """Random allocation vs. its optimized version, ``baseline_runs`` times.

    Keys are fixed across runs; each run draws fresh node identifiers and an
    optimizer seed. Reported availabilities are means over runs.
    """
    ss = np.random.SeedSequence(seed)
    key_seed, *run_seeds = ss.generate_state(1 + 2 * config.baseline_runs)
    keys = random_keys(config.n_keys, config.id_space_bits, int(key_seed))
    runs = []
    for r in range(config.baseline_runs):
        id_seed, opt_seed = int(run_seeds[2 * r]), int(run_seeds[2 * r + 1])
        ids = random_ids(len(users), config.id_space_bits, np.random.default_rng(id_seed))
        alloc = RingAllocation(tuple(users), ids, keys, replication_n, config.id_space_bits)
        opt_cfg = OptimizerConfig(
            config.optimizer.epsilon, config.optimizer.patience, opt_seed, config.optimizer.max_candidates
        )
        result = optimize_ids(alloc, probs, opt_cfg)
        runs.append(
            PairedRun(
                r,
                alloc,
                result,
                result.initial_availability,
                result.final_availability,
                simulated_availability(alloc, matrix, test_start, config.test_lengths, config.sample_seconds),
                simulated_availability(result.allocation, matrix, test_start, config.test_lengths, config.sample_seconds),
            )
        )
    lengths = list(runs[0].random_simulated)
    rand = {L: float(np.mean([x.random_simulated[L] for x in runs])) for L in lengths}
    opt = {L: float(np.mean([x.optimized_simulated[L] for x in runs])) for L in lengths}
    outcome = AvailabilityOutcome(
        float(np.mean([x.optimized_predicted for x in runs])),
        opt,
        rand,
        {L: unavailability_reduction(opt[L], rand[L]) for L in lengths},
    )
    return PairedOutcome(runs, outcome)


def save_allocation(alloc: RingAllocation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(alloc.to_dict(), sort_keys=True) + "\n")


def load_allocation(path: str | Path) -> RingAllocation:
    return RingAllocation.from_dict(json.loads(Path(path).read_text()))


def lengths_from_days(days: Sequence[float], slot_seconds: int) -> tuple[int, ...]:
    return tuple(int(round(d * DAY / slot_seconds)) for d in days)
