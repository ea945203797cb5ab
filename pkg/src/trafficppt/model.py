"""TrafficPPT network: embeddings, multi-view attention blocks, output head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .road_graph import AdjacencyTables, DiscretizationSpec, RoadNetwork, build_adjacency_tables

POOL_SHAPES = ("BV1C", "BVLC", "B11C")
ATTENTION_MODES = ("multi-query", "multi-head")


@dataclass
class ModelConfig:
    V: int
    T: int
    L: int
    M: int = 1
    N: int = 4
    C: int = 64
    H: int = 16
    N_block: int = 8
    ffn_expansion: int = 2
    K: int = 0  # 0 = continuous features through the MLP tokenizer
    attention_mode: str = "multi-query"  # adjacency cross-attention
    self_attention_mode: str = "multi-query"
    adj_pool_shape: str = "BV1C"
    use_history: bool = True
    use_adjacency: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.C % self.H:
            raise ValueError(f"hidden size C={self.C} is not divisible by H={self.H}")
        if self.N_block < 1:
            raise ValueError("N_block must be at least 1")
        if self.attention_mode not in ATTENTION_MODES or self.self_attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention modes must be one of {ATTENTION_MODES}")
        if self.adj_pool_shape not in POOL_SHAPES:
            raise ValueError(f"adj_pool_shape must be one of {POOL_SHAPES}")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        from .config import parse_key_values
        return cls.from_mapping(parse_key_values(Path(path).read_text()))


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    if typ in ("bool", bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if typ in ("int", int):
        return int(raw)
    return raw.strip()


def sinusoid(n: int, C: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(C)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / C)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def adjacency_for(net: RoadNetwork, config: ModelConfig, weights: np.ndarray | None = None) -> AdjacencyTables:
    """Tables in the form the model expects (discretized when ``K > 0``)."""
    cols = [net.weights] + [np.array([e.features[k] for e in net.edges]) for k in range(len(net.feature_names))]
    if config.K:
        specs = [DiscretizationSpec.fit(c, config.K) for c in cols]
    else:
        specs = [None] * len(cols)
    return build_adjacency_tables(net, specs, weights=weights)


class TrafficPPT:
    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Parameter] = {}
        C, V = cfg.C, cfg.V

        def param(name, value):
            self.params[name] = Parameter(name, np.asarray(value, dtype=self.dtype))
            return self.params[name]

        def dense(prefix, n_in, n_out):
            param(prefix + ".w", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)))
            param(prefix + ".b", np.zeros(n_out))

        def norm(prefix, n=C):
            param(prefix + ".g", np.ones(n))
            param(prefix + ".b", np.zeros(n))

        def attn(prefix, mode):
            kv = C if mode == "multi-head" else C // cfg.H
            dense(prefix + ".q", C, C)
            # no key bias: it shifts every score in a row equally, so its gradient is always zero
            param(prefix + ".k.w", rng.normal(0.0, 1.0 / math.sqrt(C), (C, kv)))
            dense(prefix + ".v", C, kv)
            dense(prefix + ".o", C, C)

        # city-specific embeddings
        param("embed.traj", rng.normal(0.0, 1.0, (V + 1, C)))
        dense("embed.obs", C, C)
        norm("embed.obs_ln")
        if cfg.use_adjacency:
            for i in range(cfg.M):
                if cfg.K:
                    param(f"embed.adj{i}", rng.normal(0.0, 1.0, (cfg.K + 1, C)))
                else:
                    dense(f"embed.adj{i}_mlp", 1, C)
                    norm(f"embed.adj{i}_ln")
        # shared backbone
        for b in range(cfg.N_block):
            p = f"backbone.{b}"
            if cfg.use_adjacency:
                norm(p + ".ln_adj")
                attn(p + ".adj", cfg.attention_mode)
            if cfg.use_history and cfg.N > 0:
                norm(p + ".ln_his")
                attn(p + ".his", "multi-head")
            norm(p + ".ln_self")
            attn(p + ".self", cfg.self_attention_mode)
            norm(p + ".ln_ffn")
            dense(p + ".ffn1", C, cfg.ffn_expansion * C)
            dense(p + ".ffn2", cfg.ffn_expansion * C, C)
        dense("head", C, V + 1)

        self.pos_t = sinusoid(cfg.T, C).astype(self.dtype)
        self.pos_vl = (sinusoid(V, C)[:, None, :] + sinusoid(cfg.L, C)[None, :, :]).astype(self.dtype)

    # ------------------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _attn_params(self, prefix):
        p = self.params
        out = {f"{kind}{x}": p.get(f"{prefix}.{x}.{kind}") for x in "qkvo" for kind in "wb"}
        return out

    def _ln(self, x, prefix):
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _check_tokens(self, X):
        X = np.asarray(X)
        if X.size and (X.max() > self.config.V or X.min() < 0):
            raise ValueError(f"token outside 0..{self.config.V}")
        return X

    # ------------------------------------------------------------------
    def embed_observation(self, X) -> Tensor:
        X = self._check_tokens(X)
        p = self.params
        x = nx.add(nx.embedding(p["embed.traj"], X), self.pos_t[: X.shape[-1]])
        x = nx.linear(x, p["embed.obs.w"], p["embed.obs.b"])
        return nx.silu(self._ln(x, "embed.obs_ln"))

    def embed_history(self, X_his) -> Tensor:
        X_his = self._check_tokens(X_his)
        B, N, T = X_his.shape
        z = self.embed_observation(X_his.reshape(B * N, T))
        return nx.reshape(z, (B, N * T, self.config.C))

    def embed_adjacency(self, A: AdjacencyTables) -> Tensor:
        p, cfg = self.params, self.config
        A0 = A.A0 if A.A0.ndim == 3 else A.A0[None]
        mask = A0 != 0
        terms = [nx.embedding(p["embed.traj"], A0)]
        for i, table in enumerate(A.features[: cfg.M]):
            t = table if table.ndim == 3 else table[None]
            if cfg.K:
                terms.append(nx.embedding(p[f"embed.adj{i}"], t.astype(np.int64)))
            else:
                h = nx.linear(t[..., None].astype(self.dtype), p[f"embed.adj{i}_mlp.w"], p[f"embed.adj{i}_mlp.b"])
                h = nx.silu(self._ln(h, f"embed.adj{i}_ln"))
                terms.append(nx.mul(h, mask[..., None].astype(self.dtype)))
        terms.append(self.pos_vl[: A0.shape[1], : A0.shape[2]])
        z = nx.add_n(*terms)  # (B', V, L, C)
        Bp, V, L, C = z.shape
        shape = cfg.adj_pool_shape
        if shape == "BV1C":
            z = nx.masked_mean(z, mask, axis=2)
            return nx.reshape(z, (Bp, V, C))
        if shape == "B11C":
            z = nx.masked_mean(z, mask, axis=(1, 2))
            return nx.reshape(z, (Bp, 1, C))
        return nx.reshape(z, (Bp, V * L, C))

    def block(self, b: int, z_obs, z_his, z_adj) -> Tensor:
        cfg = self.config
        pre = f"backbone.{b}"
        parts = [z_obs]
        if z_adj is not None:
            q = self._ln(z_obs, pre + ".ln_adj")
            parts.append(nx.attention(q, z_adj, self._attn_params(pre + ".adj"), cfg.H, cfg.attention_mode))
        if z_his is not None:
            q = self._ln(z_obs, pre + ".ln_his")
            parts.append(nx.attention(q, z_his, self._attn_params(pre + ".his"), cfg.H, "multi-head"))
        z = nx.add_n(*parts) if len(parts) > 1 else z_obs
        s = self._ln(z, pre + ".ln_self")
        z = nx.add(nx.attention(s, s, self._attn_params(pre + ".self"), cfg.H, cfg.self_attention_mode), z)
        f = self._ln(z, pre + ".ln_ffn")
        p = self.params
        f = nx.silu(nx.linear(f, p[pre + ".ffn1.w"], p[pre + ".ffn1.b"]))
        f = nx.linear(f, p[pre + ".ffn2.w"], p[pre + ".ffn2.b"])
        return nx.add(f, z)

    def logits(self, X, X_his, A: AdjacencyTables | None) -> Tensor:
        cfg = self.config
        z = self.embed_observation(X)
        z_his = None
        if cfg.use_history and cfg.N > 0 and X_his is not None and np.asarray(X_his).shape[1] > 0:
            z_his = self.embed_history(X_his)
        z_adj = self.embed_adjacency(A) if (cfg.use_adjacency and A is not None) else None
        for b in range(cfg.N_block):
            z = self.block(b, z, z_his, z_adj)
        return nx.linear(z, self.params["head.w"], self.params["head.b"])

    def forward(self, X, X_his, A: AdjacencyTables | None) -> Tensor:
        return nx.softmax(self.logits(X, X_his, A))

    __call__ = forward

    def predict(self, X, X_his, A, batch_size: int = 256) -> np.ndarray:
        """Probabilities for a whole set, without recording gradients."""
        X = np.asarray(X)
        out = []
        for s in range(0, len(X), batch_size):
            his = None if X_his is None else np.asarray(X_his)[s:s + batch_size]
            out.append(self.forward(X[s:s + batch_size], his, A).value)
        return np.concatenate(out) if out else np.zeros((0, self.config.T, self.config.V + 1))

    # ------------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        nx.save_parameters(self.parameters(), path)

    def load(self, path: str | Path) -> None:
        nx.load_parameters(self.parameters(), path)

    def load_backbone(self, path: str | Path) -> list[str]:
        return nx.load_parameters(self.parameters(), path, prefixes=("backbone.",))
