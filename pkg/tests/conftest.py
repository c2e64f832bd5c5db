from __future__ import annotations

import numpy as np
import pytest

from crowdnav.fields import GridSpec

# (criterion number, description, passed, detail) rows filled by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def spec() -> GridSpec:
    return GridSpec()


@pytest.fixture
def small_spec() -> GridSpec:
    return GridSpec(height=8, width=8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
