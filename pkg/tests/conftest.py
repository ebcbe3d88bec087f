import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smrecover.distflow import Branch, FeederModel  # noqa: E402


@pytest.fixture
def chain3():
    """root -> a -> b -> c with distinct impedances."""
    return FeederModel("s", (Branch("s", "a", 0.1, 0.05), Branch("a", "b", 0.08, 0.04),
                             Branch("b", "c", 0.05, 0.03)))


@pytest.fixture
def tee():
    """root -> 1 -> {2, 3}, 3 -> 4, 1 -> 5: a small branching feeder."""
    return FeederModel("0", (Branch("0", "1", 0.05, 0.03), Branch("1", "2", 0.08, 0.02),
                             Branch("1", "3", 0.04, 0.05), Branch("3", "4", 0.06, 0.04),
                             Branch("1", "5", 0.03, 0.01)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE[name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
