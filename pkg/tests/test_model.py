import numpy as np
import pytest

from trafficppt import numerics as nx
from trafficppt.dataset import CheckpointSet, SampleSet, finetune_mask
from trafficppt.model import ModelConfig, TrafficPPT, adjacency_for, sinusoid
from trafficppt.road_graph import Edge, RoadNetwork, build_adjacency_tables
from trafficppt.simulator import SimConfig, generate_fleet
from trafficppt.training import TrainConfig, train

from conftest import random_network


def desk_config(**kw):
    base = dict(V=6, T=5, L=3, N=2, C=8, H=2, N_block=1)
    base.update(kw)
    return ModelConfig(**base)


def random_inputs(rng, cfg, B=3):
    X = rng.integers(0, cfg.V + 1, (B, cfg.T))
    X_his = rng.integers(0, cfg.V + 1, (B, cfg.N, cfg.T))
    return X, X_his


@pytest.fixture
def net6():
    return random_network(np.random.default_rng(0), 6, p=0.25)


class TestEmbedding:
    def test_all_zero_observation(self):
        cfg = desk_config()
        z = TrafficPPT(cfg).embed_observation(np.zeros((2, 5), dtype=int)).value
        assert z.shape == (2, 5, 8) and np.all(np.isfinite(z))

    def test_positions_separate_equal_tokens(self):
        z = TrafficPPT(desk_config()).embed_observation(np.array([[3, 3, 0, 0, 0]])).value
        assert not np.allclose(z[0, 0], z[0, 1])

    def test_matches_hand_composition(self):
        cfg = desk_config()
        m = TrafficPPT(cfg)
        X = np.array([[1, 0, 4, 4, 6]])
        p = {k: v.value for k, v in m.params.items()}
        x = p["embed.traj"][X] + sinusoid(5, 8)
        x = x @ p["embed.obs.w"] + p["embed.obs.b"]
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        x = (x - mu) / np.sqrt(var + 1e-5) * p["embed.obs_ln.g"] + p["embed.obs_ln.b"]
        expected = x / (1 + np.exp(-x))
        np.testing.assert_allclose(m.embed_observation(X).value, expected, atol=1e-12)

    def test_history_shares_weights(self):
        m = TrafficPPT(desk_config(N=1))
        X = np.array([[1, 2, 2, 3, 0], [4, 5, 0, 0, 0]])
        z_his = m.embed_history(X[:, None, :]).value
        np.testing.assert_array_equal(z_his, m.embed_observation(X).value)

    def test_history_shape(self):
        cfg = desk_config(N=3, T=4)
        z = TrafficPPT(cfg).embed_history(np.ones((2, 3, 4), dtype=int)).value
        assert z.shape == (2, 12, 8)

    def test_token_out_of_range(self):
        with pytest.raises(ValueError):
            TrafficPPT(desk_config()).embed_observation(np.array([[7, 0, 0, 0, 0]]))


class TestAdjacencyPooling:
    def test_single_neighbour_rows(self):
        chain = RoadNetwork(3, (Edge(1, 2, 1.0), Edge(2, 3, 2.0), Edge(3, 1, 0.5)))
        cfg = desk_config(V=3, L=1)
        m = TrafficPPT(cfg)
        A = adjacency_for(chain, cfg)
        cfg_full = desk_config(V=3, L=1, adj_pool_shape="BVLC")
        m_full = TrafficPPT(cfg_full)
        np.testing.assert_array_equal(m.embed_adjacency(A).value, m_full.embed_adjacency(A).value)

    def test_padding_slots_ignored(self):
        # node 1 has two real slots among five
        net = RoadNetwork(6, (Edge(1, 2, 1.0), Edge(1, 3, 2.0), *(Edge(2, d, 1.0) for d in (1, 3, 4, 5, 6))))
        cfg = desk_config(L=5, K=4)
        m = TrafficPPT(cfg)
        A = adjacency_for(net, cfg)
        full = TrafficPPT(desk_config(L=5, K=4, adj_pool_shape="BVLC")).embed_adjacency(A).value.reshape(6, 5, 8)
        pooled = m.embed_adjacency(A).value[0]
        np.testing.assert_allclose(pooled[0], full[0, :2].mean(0), atol=1e-12)

    def test_pool_shapes(self, net6):
        for shape, rows in (("BV1C", 6), ("B11C", 1)):
            cfg = desk_config(adj_pool_shape=shape, L=build_adjacency_tables(net6).L)
            z = TrafficPPT(cfg).embed_adjacency(adjacency_for(net6, cfg)).value
            assert z.shape == (1, rows, 8)

    def test_per_sample_tables(self, net6):
        cfg = desk_config(L=build_adjacency_tables(net6).L)
        w = np.stack([net6.weights, net6.weights * 2, net6.weights * 3])
        A = adjacency_for(net6, cfg, weights=w)
        m = TrafficPPT(cfg)
        X, X_his = random_inputs(np.random.default_rng(1), cfg)
        Y = m(X, X_his, A).value
        assert Y.shape == (3, 5, 7)


class TestBlock:
    def test_residual_identity(self):
        cfg = desk_config()
        m = TrafficPPT(cfg)
        for name, p in m.params.items():
            if name.startswith("backbone.") and ".ln_" not in name:
                p.value = np.zeros_like(p.value)
        z = np.random.default_rng(2).standard_normal((2, 5, 8))
        out = m.block(0, z, np.random.default_rng(3).standard_normal((2, 10, 8)), z[:1, :4]).value
        np.testing.assert_array_equal(out, z)

    def test_shape(self):
        cfg = desk_config(C=16, H=4)
        m = TrafficPPT(cfg)
        z = np.random.default_rng(4).standard_normal((3, 5, 16))
        assert m.block(0, z, None, None).value.shape == (3, 5, 16)

    def test_ablations_drop_parameters(self):
        full = TrafficPPT(desk_config())
        bare = TrafficPPT(desk_config(use_history=False, use_adjacency=False))
        assert any(".his." in n for n in full.params) and not any(".his." in n for n in bare.params)
        assert not any(".adj" in n for n in bare.params)

    @pytest.mark.parametrize("kw", [
        dict(use_history=False), dict(use_adjacency=False), dict(K=10), dict(K=20), dict(K=30),
        dict(adj_pool_shape="BVLC"), dict(adj_pool_shape="B11C"), dict(attention_mode="multi-head"),
        dict(N=0),
    ])
    def test_structural_axes(self, kw, net6):
        cfg = desk_config(L=build_adjacency_tables(net6).L, **kw)
        m = TrafficPPT(cfg)
        X, X_his = random_inputs(np.random.default_rng(5), cfg)
        Y = m(X, X_his, adjacency_for(net6, cfg)).value
        assert np.abs(Y.sum(-1) - 1).max() < 1e-6


class TestOutput:
    def test_simplex(self, net6):
        cfg = desk_config(L=build_adjacency_tables(net6).L)
        X, X_his = random_inputs(np.random.default_rng(6), cfg, B=4)
        Y = TrafficPPT(cfg)(X, X_his, adjacency_for(net6, cfg)).value
        assert Y.shape == (4, 5, 7)
        assert np.all(Y >= 0) and np.abs(Y.sum(-1) - 1).max() < 1e-6

    def test_fully_masked(self, net6):
        cfg = desk_config(L=build_adjacency_tables(net6).L)
        Y = TrafficPPT(cfg)(np.zeros((2, 5), int), np.zeros((2, 2, 5), int), adjacency_for(net6, cfg)).value
        assert np.all(np.isfinite(Y)) and np.abs(Y.sum(-1) - 1).max() < 1e-6

    def test_permutation_consistency(self, net6):
        rng = np.random.default_rng(7)
        cfg = desk_config(L=build_adjacency_tables(net6).L)
        perm = np.concatenate([[0], rng.permutation(np.arange(1, 7))])  # perm[old] = new
        relabeled = RoadNetwork(6, tuple(sorted(
            (Edge(int(perm[e.origin]), int(perm[e.destination]), e.weight) for e in net6.edges),
            key=lambda e: (e.origin, e.destination))))
        m, m2 = TrafficPPT(cfg), TrafficPPT(cfg)
        inv = np.argsort(perm)  # inv[new] = old
        m2.params["embed.traj"].value = m.params["embed.traj"].value[inv]
        m2.params["head.w"].value = m.params["head.w"].value[:, inv]
        m2.params["head.b"].value = m.params["head.b"].value[inv]
        m2.pos_vl = m.pos_vl[inv[1:] - 1]
        X, X_his = random_inputs(rng, cfg)
        Y = m(X, X_his, adjacency_for(net6, cfg)).value
        Y2 = m2(perm[X], perm[X_his], adjacency_for(relabeled, cfg)).value
        np.testing.assert_allclose(Y2[..., perm], Y, atol=1e-12)

    def test_gradient_check(self):
        net = random_network(np.random.default_rng(8), 8, p=0.15)
        cfg = ModelConfig(V=8, T=6, L=build_adjacency_tables(net).L, N=2, C=8, H=2, N_block=1)
        m = TrafficPPT(cfg)
        A = adjacency_for(net, cfg)
        rng = np.random.default_rng(9)
        X, X_his = random_inputs(rng, cfg, B=2)
        target = np.eye(9)[rng.integers(0, 9, (2, 6))]
        f = lambda: nx.masked_cross_entropy(m(X, X_his, A), target, np.ones((2, 6)))
        assert nx.grad_check(f, m.parameters(), coords=20) < 1e-3

    def test_save_load_bit_identical(self, net6, tmp_path):
        cfg = desk_config(L=build_adjacency_tables(net6).L)
        m = TrafficPPT(cfg)
        m.params["head.b"].value = m.params["head.b"].value + 0.123
        m.save(tmp_path / "m.ckpt")
        m2 = TrafficPPT(desk_config(L=cfg.L, seed=99))
        m2.load(tmp_path / "m.ckpt")
        X, X_his = random_inputs(np.random.default_rng(10), cfg)
        A = adjacency_for(net6, cfg)
        assert m(X, X_his, A).value.tobytes() == m2(X, X_his, A).value.tobytes()

    def test_tiny_overfit(self):
        V = 8
        chain = RoadNetwork(V, tuple(Edge(i, i + 1, 1.0 + (i % 3)) for i in range(1, V)))
        fleet = generate_fleet(chain, SimConfig(vehicles=32, histories=2, horizon=14, sigma=0.0, seed=3))
        samples = SampleSet.from_records(fleet)
        cfg = ModelConfig(V=V, T=14, L=1, N=2, C=32, H=4, N_block=1)
        m = TrafficPPT(cfg)
        A = adjacency_for(chain, cfg)
        cps = CheckpointSet(frozenset({1, 3, 5, 7}), 0.5)
        obs = finetune_mask(samples.observations, cps, reference=samples.targets)
        train(m, samples, A, TrainConfig(stage="finetune", lr0=0.3, epochs=120, batch_size=8),
              masker=lambda s: finetune_mask(s.observations, cps, reference=s.targets))
        pred = m.predict(obs, samples.histories, A).argmax(-1)
        real = samples.targets != 0
        np.testing.assert_array_equal(pred[real], samples.targets[real])
