import itertools
from collections import Counter

import numpy as np
import pytest

from trafficppt.road_graph import Edge, RoadNetwork, grid_network
from trafficppt.simulator import (
    GenerationError,
    SimConfig,
    UnreachableError,
    dwell_steps,
    format_fleet,
    generate_fleet,
    perturb_weights,
    read_fleet,
    sample_od_pairs,
    shortest_path,
    shortest_path_trajectory,
    write_fleet,
)

from conftest import random_network


def bellman_ford(net, origin):
    """Label-correcting oracle, independent of the Dijkstra implementation."""
    dist = {v: np.inf for v in range(1, net.node_count + 1)}
    dist[origin] = 0.0
    for _ in range(net.node_count - 1):
        changed = False
        for e in net.edges:
            if dist[e.origin] + e.weight < dist[e.destination]:
                dist[e.destination] = dist[e.origin] + e.weight
                changed = True
        if not changed:
            break
    return dist


def runs(tokens):
    """(token, run length) pairs of the non-padding prefix."""
    tokens = [int(t) for t in tokens if t]
    return [(k, len(list(g))) for k, g in itertools.groupby(tokens)]


class TestOD:
    def test_two_nodes(self):
        net = RoadNetwork(2, (Edge(1, 2, 1.0),))
        pairs = sample_od_pairs(net, 50, np.random.default_rng(0))
        assert set(pairs) == {(1, 2)}

    def test_uniform_over_reachable(self, chain):
        net = RoadNetwork(3, (Edge(1, 2, 1.0), Edge(2, 3, 1.0)))
        pairs = sample_od_pairs(net, 1000, np.random.default_rng(1))
        freq = Counter(pairs)
        assert set(freq) == {(1, 2), (1, 3), (2, 3)}
        for n in freq.values():
            assert abs(n / 1000 - 1 / 3) <= 0.05

    def test_empty(self, chain):
        assert sample_od_pairs(chain, 0, np.random.default_rng(0)) == []

    def test_disconnected_gives_up(self):
        net = RoadNetwork(30, (Edge(1, 2, 1.0),))
        with pytest.raises(GenerationError, match="origin"):
            sample_od_pairs(net, 1, np.random.default_rng(0), max_retries=5)


class TestPerturb:
    def test_zero_noise(self, chain):
        assert perturb_weights(chain, 0.0, np.random.default_rng(0)).weights.tolist() == chain.weights.tolist()

    def test_log_ratio_mean(self):
        rng = np.random.default_rng(3)
        net = RoadNetwork(2, tuple(Edge(1, 2, 1.0) for _ in range(1)))
        # a wide star gives 10^4 edges
        big = RoadNetwork(10_001, tuple(Edge(1, d, float(d % 7 + 1)) for d in range(2, 10_002)))
        out = perturb_weights(big, 0.5, rng)
        ratio = np.log(out.weights / big.weights)
        assert abs(ratio.mean()) < 0.02
        assert out.edge_set() == big.edge_set()
        assert np.all(out.weights > 0)
        assert net.edge_count == 1


class TestShortestPath:
    def test_worked_example(self, chain):
        cfg = SimConfig(horizon=8, speed_unit=1.0)
        np.testing.assert_array_equal(shortest_path_trajectory(chain, 1, 4, cfg), [1, 2, 2, 2, 2, 3, 4, 0])

    def test_same_node(self, chain):
        cfg = SimConfig(horizon=5)
        np.testing.assert_array_equal(shortest_path_trajectory(chain, 2, 2, cfg), [2, 0, 0, 0, 0])

    def test_unreachable(self, chain):
        with pytest.raises(UnreachableError):
            shortest_path(chain, 4, 1)

    def test_truncation(self, chain):
        traj = shortest_path_trajectory(chain, 1, 4, SimConfig(horizon=4))
        np.testing.assert_array_equal(traj, [1, 2, 2, 2])

    def test_dwell_rule(self):
        assert dwell_steps(0.2, 1.0) == 1
        assert dwell_steps(2.5, 1.0) == 3
        assert dwell_steps(3.0, 0.5) == 6

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_bellman_ford(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(rng, 20, p=0.12)
        o, d = (int(x) for x in rng.choice(np.arange(1, 21), 2, replace=False))
        path, cost = shortest_path(net, o, d)
        assert path[0] == o and path[-1] == d
        walked = sum(net.edges[net.edge_index[(u, v)] - 1].weight for u, v in zip(path, path[1:]))
        assert walked == pytest.approx(cost, abs=1e-12)
        assert cost == pytest.approx(bellman_ford(net, o)[d], abs=1e-9)

    def test_ties_prefer_smaller_ids(self):
        net, _ = grid_network(2, 2)
        # 1 -> 4 has two unit-cost routes, via 2 or via 3
        path, _ = shortest_path(net, 1, 4)
        assert path == [1, 2, 4]


class TestFleet:
    def test_zero_noise_all_equal(self):
        net, _ = grid_network(3, 3)
        for r in generate_fleet(net, SimConfig(vehicles=20, histories=3, sigma=0.0, horizon=20)):
            for h in r.histories:
                np.testing.assert_array_equal(h, r.ground_truth)

    def test_cardinality(self):
        net, _ = grid_network(4, 4)
        fleet = generate_fleet(net, SimConfig(vehicles=500, histories=4, sigma=0.2, horizon=20))
        assert len(fleet) == 500
        assert all(len(r.histories) == 4 for r in fleet)
        assert [r.vehicle_id for r in fleet] == list(range(500))

    def test_deterministic_files(self, tmp_path):
        net, _ = grid_network(4, 4)
        cfg = SimConfig(vehicles=60, histories=2, sigma=0.4, horizon=20, seed=11)
        write_fleet(generate_fleet(net, cfg), tmp_path / "a.txt")
        write_fleet(generate_fleet(net, cfg), tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_order_independent(self):
        net, _ = grid_network(4, 4)
        cfg = SimConfig(vehicles=30, histories=2, sigma=0.4, horizon=20, seed=5)
        full = generate_fleet(net, cfg)
        tail = generate_fleet(net, SimConfig(vehicles=10, histories=2, sigma=0.4, horizon=20, seed=5), first_id=20)
        assert format_fleet(full[20:]) == format_fleet(tail)

    def test_invariants(self):
        net, _ = grid_network(4, 4, weight=1.5)
        cfg = SimConfig(vehicles=80, histories=3, sigma=0.5, horizon=40, speed_unit=0.7, seed=2)
        for r in generate_fleet(net, cfg):
            for k, traj in enumerate([r.ground_truth, *r.histories]):
                assert traj[0] == r.od[0]
                nz = np.flatnonzero(traj)
                assert np.all(traj[: nz[-1] + 1] != 0)  # zeros only as trailing padding
                rl = runs(traj)
                assert rl[-1] == (r.od[1], 1)
                # every run but the last is an edge whose length matches the dwell rule
                weights = r.weights[0] if k == 0 else r.weights[k]
                for (u, n), (v, _) in zip(rl, rl[1:]):
                    i = net.edge_index[(u, v)] - 1
                    assert n == dwell_steps(weights[i], cfg.speed_unit)

    def test_round_trip_file(self, tmp_path):
        net, _ = grid_network(3, 3)
        fleet = generate_fleet(net, SimConfig(vehicles=5, histories=2, sigma=0.2, horizon=12))
        write_fleet(fleet, tmp_path / "f.txt")
        back = read_fleet(tmp_path / "f.txt")
        for a, b in zip(fleet, back):
            np.testing.assert_array_equal(a.ground_truth, b.ground_truth)
            assert len(b.histories) == 2 and a.od == b.od

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(horizon=1)
        with pytest.raises(ValueError):
            SimConfig(speed_unit=0)
