import numpy as np
import pytest

from asdnet.graph import AdjacencyMatrix

ACCEPTANCE_LINES = []


def random_undirected(rng, n, p=0.4, weighted=True, loops=False):
    dense = np.triu((rng.random((n, n)) < p).astype(float), 0 if loops else 1)
    if weighted:
        dense *= rng.uniform(0.1, 2.0, size=(n, n))
    dense = np.triu(dense) + np.triu(dense, 1).T
    return AdjacencyMatrix.from_dense(dense)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
