from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uptime.evaluation import (
    EvalConfig,
    ProtocolViolation,
    QuadrantData,
    cell_errors,
    fit_phase,
    mse,
    retrain_phase,
    run_grid,
    run_protocol,
    score_phase,
)
from uptime.predictors import ALL_KINDS, UninformedPredictor
from uptime.split import make_split
from uptime.synth import SynthConfig, UserArchetype, constant_profile, generate
from uptime.trace import TraceMatrix


def test_mse_examples():
    assert mse([0.5, 0.5, 0.5], [0.0, 1.0, 0.3]) == 0.25
    assert mse([1.0], [1.0]) == 0.0
    assert mse([0.3], [1.0]) == pytest.approx(0.49)
    assert mse([0.3], [0.0]) == pytest.approx(0.09)
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mse([0.1, 0.2], [0.1])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=50))
def test_fractional_rule_matches_binary_rule(pairs):
    p = np.array([a for a, _ in pairs])
    x = np.array([float(b) for _, b in pairs])
    two_case = np.where(x == 1.0, (1 - p) ** 2, p**2)
    np.testing.assert_array_equal(cell_errors(p, x), two_case)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 30))
def test_mse_is_order_invariant(seed, n, m):
    rng = np.random.default_rng(seed)
    p, x = rng.random((n, m)), rng.random((n, m))
    rows, cols = rng.permutation(n), rng.permutation(m)
    assert mse(p, x) == mse(p[rows][:, cols], x[rows][:, cols])
    assert mse(p, x) == mse(p.T, x.T)


def test_q4_locked_until_scoring(small_trace):
    m, _ = small_trace
    data = QuadrantData(m, make_split(m, 4 * 168, 3 * 168, 168, seed=1))
    with pytest.raises(ProtocolViolation):
        data.view(4)
    fitted = fit_phase(data)
    pipelines = retrain_phase(fitted, data)
    assert "Q4" not in data.access_log
    score_phase(pipelines, data)
    assert data.access_log[-2:] == ["unlock", "Q4"]


def test_protocol_access_order(small_trace):
    m, _ = small_trace
    result = run_protocol(m, make_split(m, 4 * 168, 3 * 168, 168, seed=1))
    log = result.access_log
    assert log.index("unlock") < log.index("Q4")
    assert log.count("Q4") == 1
    assert log[: log.index("unlock")] == ["Q1", "Q2", "Q3"]


def test_predictions_cannot_depend_on_q4(small_trace):
    m, _ = small_trace
    split = make_split(m, 4 * 168, 3 * 168, 168, seed=1)
    baseline = run_protocol(m, split)
    # scramble Q4 and check every prediction is unchanged
    cells = m.cells.copy()
    rows = m.user_indices(split.test_users)
    cells[np.ix_(rows, np.arange(*split.test_period))] = 1.0
    other = run_protocol(TraceMatrix(m.slot_spec, m.users, cells), split)
    slots = np.arange(*split.test_period)
    for name, p in baseline.pipelines.items():
        np.testing.assert_array_equal(
            p.predict_matrix(split.test_users, slots).p, other.pipelines[name].predict_matrix(split.test_users, slots).p
        )


def test_fit_quadrant_least_squares_optimality(small_trace):
    m, _ = small_trace
    data = QuadrantData(m, make_split(m, 4 * 168, 3 * 168, 168, seed=2))
    d = fit_phase(data).diagnostics
    for name in d.raw:
        assert d.calibrated[name] <= d.raw[name] + 1e-12
    assert d.combined <= min(d.raw.values()) + 1e-12
    assert d.combined <= min(d.calibrated.values()) + 1e-12


def test_short_training_uses_half_period_grace(small_trace):
    m, _ = small_trace
    data = QuadrantData(m, make_split(m, 4 * 168, 168, 168, seed=2))
    fitted = fit_phase(data, grace_days=7)
    assert 0 < fitted.mortality.r <= 1


def grid(small_trace, **kw):
    m, _ = small_trace
    cfg = EvalConfig(training_lengths=(168, 336, 672, 10_000), test_start=5 * 168, test_len=168, **kw)
    return run_grid(m, cfg)


def test_grid_report_shape(small_trace):
    report = grid(small_trace)
    header = report.table()[0]
    names = [k.name for k in ALL_KINDS] + ["adhoc"]
    assert header[-9:] == names
    assert "uninformed" in header
    assert [r.status for r in report.rows] == ["ok", "ok", "ok", "unavailable"]
    for row in report.rows[:3]:
        assert set(row.mse) == set(names) | {"uninformed"}
        assert row.uninformed == 0.25
        assert all(0 <= v <= 1 for v in row.mse.values())
        assert row.n_train_kept <= row.n_train_users
    assert len(report.to_csv().splitlines()) == 5


def test_grid_no_users_row(small_trace):
    report = grid(small_trace, availability_threshold=1.0)
    assert [r.status for r in report.rows][:3] == ["no-users"] * 3


def test_grid_is_deterministic(small_trace):
    a, b = grid(small_trace, seed=3), grid(small_trace, seed=3)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


def test_uninformed_on_half_trace(spec):
    m, _ = generate(SynthConfig((UserArchetype("h", constant_profile(0.5, spec), 1.0),), 200, 3, seed=1))
    report = run_grid(m, EvalConfig(training_lengths=(336,)))
    row = report.rows[0]
    assert row.uninformed == pytest.approx(0.25, abs=0.002)
    assert row.mse["weekly_global"] == pytest.approx(0.25, abs=0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(training_lengths=())
    with pytest.raises(ValueError):
        EvalConfig(training_lengths=(10,), availability_threshold=2)
    assert UninformedPredictor().p == 0.5
