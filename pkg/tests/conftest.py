import numpy as np
import pytest

from trafficppt.road_graph import Edge, RoadNetwork, parse_network

CHAIN_TEXT = """# three-edge chain
V=4 E=3
1 2 1.0
2 3 4.0
3 4 1.0
"""


@pytest.fixture
def chain():
    return parse_network(CHAIN_TEXT)


def random_network(rng, V, p=0.3, lo=0.5, hi=3.0, ensure_cycle=True):
    """Random directed graph; a Hamiltonian cycle keeps everything reachable."""
    pairs = set()
    if ensure_cycle:
        perm = rng.permutation(np.arange(1, V + 1))
        pairs |= {(int(perm[i]), int(perm[(i + 1) % V])) for i in range(V)}
    for o in range(1, V + 1):
        for d in range(1, V + 1):
            if o != d and rng.random() < p:
                pairs.add((o, d))
    pairs = sorted(pairs)
    edges = tuple(Edge(o, d, float(rng.uniform(lo, hi))) for o, d in pairs)
    return RoadNetwork(V, edges)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
