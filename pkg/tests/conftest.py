from __future__ import annotations

import numpy as np
import pytest

from uptime.synth import SynthConfig, UserArchetype, block_profile, constant_profile, generate, WEEKDAYS
from uptime.trace import SlotSpec


@pytest.fixture(scope="session")
def spec() -> SlotSpec:
    return SlotSpec()


@pytest.fixture(scope="session")
def small_trace(spec):
    """Two archetypes with mortality, 120 users over 6 weeks."""
    office = block_profile(spec, 0.05, [{"days": WEEKDAYS, "hours": (9, 18), "p": 0.9}])
    archetypes = (
        UserArchetype("office", office, 0.5, 0.995),
        UserArchetype("steady", constant_profile(0.6, spec), 0.5, 0.99),
    )
    return generate(SynthConfig(archetypes, n_users=120, n_weeks=6, seed=17, slot_spec=spec))


def random_cells(rng: np.random.Generator, n_users: int, n_slots: int) -> np.ndarray:
    cells = rng.random((n_users, n_slots))
    cells[cells < 0.4] = 0.0
    return cells


ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, ok, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
