import numpy as np
import pytest

from tracelens.dataset import Dataset, Sample

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def make_dataset(n=12, dim=6, groups=("a", "b"), seed=0, parallel=True):
    rng = np.random.default_rng(seed)
    samples = []
    for j in range(n):
        for g in groups:
            samples.append(
                Sample(f"{g}-{j:03d}", g, rng.normal(size=dim), int(rng.integers(0, 2)), f"p{j:03d}" if parallel else None)
            )
    return Dataset(tuple(samples))


@pytest.fixture
def small_dataset():
    return make_dataset()
