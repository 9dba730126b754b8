import numpy as np
import pytest

from swagmos.dataio import make_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_dataset():
    """Six labeled records over three systems, 4-d features."""
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    ids = [f"u{i}" for i in range(6)]
    systems = ["A", "A", "B", "B", "C", "C"]
    mos = [1.5, 2.0, 3.0, 3.5, 4.0, 4.5]
    return make_dataset(ids, systems, x, mos, "toy")


def spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T) / n + 0.1 * np.eye(n)
