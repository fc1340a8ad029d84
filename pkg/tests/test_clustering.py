from __future__ import annotations

import numpy as np
import pytest

from uptime.clustering import cluster_users, kmeans, weekly_profiles
from uptime.synth import (
    WEEKDAYS,
    SynthConfig,
    UserArchetype,
    block_profile,
    constant_profile,
    default_archetypes,
    generate,
)


def two_archetypes(spec, n_users=80):
    day = block_profile(spec, 0.02, [{"days": WEEKDAYS, "hours": (8, 18), "p": 0.95}])
    night = constant_profile(0.9, spec) - day * 0.9
    cfg = SynthConfig((UserArchetype("day", day, 0.5), UserArchetype("night", np.clip(night, 0, 1), 0.5)), n_users, 2, seed=4)
    return generate(cfg)


def test_separated_archetypes_recovered(spec):
    m, truth = two_archetypes(spec)
    res = cluster_users(m, k=2, seed=1)
    # cluster numbering is arbitrary up to the mean-availability ordering
    agree = np.mean(res.assignments == truth.archetype_of)
    assert agree in (0.0, 1.0)


def test_single_cluster_is_mean_profile(spec):
    m, _ = two_archetypes(spec, 30)
    res = cluster_users(m, k=1)
    np.testing.assert_allclose(res.centroids[0], weekly_profiles(m).mean(axis=0), atol=1e-12)
    assert res.sizes().tolist() == [30]


def test_inertia_non_increasing(spec):
    m, _ = generate(SynthConfig(tuple(default_archetypes(spec)), 300, 2, seed=8))
    res = cluster_users(m, k=6, seed=2)
    h = np.array(res.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])
    # clusters are ordered by decreasing mean availability
    means = res.centroids.mean(axis=1)
    assert np.all(np.diff(means) <= 0)
    # high and low extremes: always-on users on top, sporadic ones at the bottom
    assert means[0] > 0.8 and means[-1] < 0.1


def test_deterministic(spec):
    m, _ = two_archetypes(spec)
    a, b = cluster_users(m, 3, seed=5), cluster_users(m, 3, seed=5)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.plot_csv() == b.plot_csv()


def test_empty_cluster_reseeded():
    # duplicate points make k-means++ pick the same location twice
    X = np.array([[0.0], [0.0], [0.0], [1.0]])
    labels, C, _ = kmeans(X, 3, seed=0)
    assert len(np.unique(labels)) == 3


def test_k_larger_than_users(spec):
    m, _ = two_archetypes(spec, 4)
    with pytest.raises(ValueError):
        cluster_users(m, k=5)


def test_plot_csv_layout(spec):
    m, _ = two_archetypes(spec, 20)
    res = cluster_users(m.select(None, (0, 24)), k=2)
    lines = res.plot_csv().splitlines()
    assert lines[0] == "slot,cluster,cluster_users,online_users,mean_online_fraction"
    assert len(lines) == 1 + 24 * 2
    total = sum(int(line.split(",")[3]) for line in lines[1:3])
    assert total == int((m.cells[:, 0] > 0).sum())
