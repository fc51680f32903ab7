import numpy as np
import pytest

from mlfactor.partition import HierarchicalPartition


@pytest.fixture
def five_feature():
    """The 5-feature, 4-level hierarchy with ranks (2, 1, 1, 1)."""
    part = HierarchicalPartition.from_sizes([[5], [3, 2], [1, 2, 1, 1], [1, 1, 1, 1, 1]])
    return part, (2, 1, 1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, line

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(line(k))
