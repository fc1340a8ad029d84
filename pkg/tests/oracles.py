"""Independent brute-force references shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np


def replication_oracle(a_percent: int, target_permille: int) -> int:
    """Smallest n with 1 - (1 - a)^n >= target, a = a_percent/100, target = t/1000.

    Integer form: 1000 * (100 - a)^n <= (1000 - t) * 100^n.
    """
    n = 1
    while 1000 * (100 - a_percent) ** n > (1000 - target_permille) * 100**n:
        n += 1
    return n


def enumerated_set_availability(p: np.ndarray) -> float:
    """Expected fraction of samples with at least one member online.

    ``p`` is members x samples; every one of the 2^(members*samples) joint
    online/offline outcomes is enumerated with its probability.
    """
    n, T = p.shape
    flat = p.ravel()
    total = 0.0
    for outcome in itertools.product((0, 1), repeat=n * T):
        o = np.array(outcome)
        prob = np.prod(np.where(o == 1, flat, 1.0 - flat))
        covered = o.reshape(n, T).any(axis=0).mean()
        total += prob * covered
    return total


def successor_sets(node_ids, keys, n, bits):
    """Neighbor set per key by sorting clockwise distances."""
    space = 1 << bits
    out = []
    for k in keys:
        dist = [((int(i) - int(k)) % space, idx) for idx, i in enumerate(node_ids)]
        out.append(sorted(idx for _, idx in sorted(dist)[: min(n, len(node_ids))]))
    return out


def best_permutation_availability(alloc, probs, predicted):
    """Maximum predicted availability over every assignment of the existing IDs."""
    best = -1.0
    for perm in itertools.permutations(range(alloc.n_nodes)):
        best = max(best, predicted(alloc.with_ids(alloc.node_ids[list(perm)]), probs)[1])
    return best
