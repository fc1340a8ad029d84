"""k-means clustering of users by their mean weekly availability profile."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .predictors import BasisKind, Period, Scope, train_basis
from .trace import TraceMatrix


@dataclass(frozen=True, eq=False)
class ClusterResult:
    """Clusters are numbered by decreasing mean centroid availability."""

    k: int
    users: tuple[str, ...]
    assignments: np.ndarray
    centroids: np.ndarray  # k x slots_per_week
    inertia_history: tuple[float, ...]
    online_fraction: np.ndarray  # k x view slots, mean cell value per cluster
    online_count: np.ndarray  # k x view slots, users with cell > 0
    first_slot: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]

    def assignment_of(self, user: str) -> int:
        return int(self.assignments[self.users.index(user)])

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def plot_csv(self) -> str:
        """Long-format per-slot online counts: slot, cluster, users, online, fraction."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slot", "cluster", "cluster_users", "online_users", "mean_online_fraction"])
        sizes = self.sizes()
        for j in range(self.online_count.shape[1]):
            for c in range(self.k):
                w.writerow(
                    [
                        self.first_slot + j,
                        c,
                        int(sizes[c]),
                        int(self.online_count[c, j]),
                        format(float(self.online_fraction[c, j]), ".10g"),
                    ]
                )
        return buf.getvalue()


def weekly_profiles(view: TraceMatrix) -> np.ndarray:
    """Per-user mean online fraction for every day-of-week/slot-of-day column."""
    basis = train_basis(view, BasisKind(Period.WEEKLY, Scope.INDIVIDUAL))
    return basis.individual_table


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _fill_empty(X: np.ndarray, C: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        d = ((X - C[labels]) ** 2).sum(axis=1)
        d[counts[labels] <= 1] = -1.0  # never empty another cluster
        far = int(np.argmax(d))
        counts[labels[far]] -= 1
        labels[far] = c
        counts[c] = 1
        C[c] = X[far]
    return labels


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster takes over the point that is farthest from its current
    centroid. Returns labels, centroids and the objective after each update.
    """
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be between 1 and the number of users ({n})")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels = _fill_empty(X, C, np.argmin(_sq_dists(X, C), axis=1), k)
    history = [float(((X - C[labels]) ** 2).sum())]
    for _ in range(max_iter):
        for c in range(k):
            C[c] = X[labels == c].mean(axis=0)
        new = _fill_empty(X, C, np.argmin(_sq_dists(X, C), axis=1), k)
        history.append(float(((X - C[new]) ** 2).sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, C, history


def cluster_users(view: TraceMatrix, k: int = 6, seed: int = 0, max_iter: int = 100) -> ClusterResult:
    X = weekly_profiles(view)
    labels, C, history = kmeans(X, k, seed, max_iter)
    # relabel by decreasing mean availability so numbering is stable
    order = np.argsort(-C.mean(axis=1), kind="stable")
    relabel = np.empty(k, dtype=np.intp)
    relabel[order] = np.arange(k)
    labels = relabel[labels]
    C = C[order]

    online = view.cells > 0
    frac = np.zeros((k, view.n_slots))
    count = np.zeros((k, view.n_slots), dtype=np.int64)
    for c in range(k):
        rows = labels == c
        if rows.any():
            frac[c] = view.cells[rows].mean(axis=0)
            count[c] = online[rows].sum(axis=0)
    return ClusterResult(k, view.users, labels, C, tuple(history), frac, count, view.first_slot)
