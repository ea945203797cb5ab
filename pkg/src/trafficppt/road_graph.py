"""Directed road networks, adjacency tables and feature discretization.

Node ids are 1-based; 0 is reserved everywhere as the unobserved/absent
token, so trajectories, adjacency tables and embedding lookups share one
index space.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_BINS = 30

_HEADER_RE = re.compile(r"^\s*V=(\d+)\s+E=(\d+)(?:\s+F=(\d+))?\s*$")


class NetworkFormatError(ValueError):
    """A network file line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NetworkValidationError(ValueError):
    """The network violates a structural invariant."""


@dataclass(frozen=True)
class Edge:
    origin: int
    destination: int
    weight: float
    features: tuple[float, ...] = ()


@dataclass(frozen=True)
class RoadNetwork:
    node_count: int
    edges: tuple[Edge, ...]
    feature_names: tuple[str, ...] = ()
    edge_index: dict[tuple[int, int], int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        V = self.node_count
        if V < 1:
            raise NetworkValidationError(f"node_count must be positive, got {V}")
        index = {}
        for i, e in enumerate(self.edges, start=1):
            for node in (e.origin, e.destination):
                if node == 0:
                    raise NetworkValidationError(
                        f"edge {i} ({e.origin},{e.destination}): node id 0 is reserved")
                if not 1 <= node <= V:
                    raise NetworkValidationError(
                        f"edge {i} ({e.origin},{e.destination}): node id {node} outside 1..{V}")
            if not (e.weight > 0 and math.isfinite(e.weight)):
                raise NetworkValidationError(
                    f"edge {i} ({e.origin},{e.destination}): weight must be positive, got {e.weight}")
            if len(e.features) != len(self.feature_names):
                raise NetworkValidationError(
                    f"edge {i}: expected {len(self.feature_names)} features, got {len(e.features)}")
            key = (e.origin, e.destination)
            if key in index:
                raise NetworkValidationError(f"duplicate edge {key}")
            index[key] = i
        object.__setattr__(self, "edge_index", index)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def origins(self) -> np.ndarray:
        return np.array([e.origin for e in self.edges], dtype=np.int64)

    @property
    def destinations(self) -> np.ndarray:
        return np.array([e.destination for e in self.edges], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.edges], dtype=np.float64)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.edge_index)

    def successors(self) -> list[list[tuple[int, float]]]:
        """Out-neighbours per node (index 0 unused), ascending destination id."""
        out: list[list[tuple[int, float]]] = [[] for _ in range(self.node_count + 1)]
        for e in self.edges:
            out[e.origin].append((e.destination, e.weight))
        for row in out:
            row.sort()
        return out

    def out_degree(self) -> np.ndarray:
        deg = np.zeros(self.node_count + 1, dtype=np.int64)
        for e in self.edges:
            deg[e.origin] += 1
        return deg

    def with_weights(self, weights: Sequence[float]) -> "RoadNetwork":
        if len(weights) != self.edge_count:
            raise ValueError(f"expected {self.edge_count} weights, got {len(weights)}")
        edges = tuple(replace(e, weight=float(w)) for e, w in zip(self.edges, weights))
        return RoadNetwork(self.node_count, edges, self.feature_names)


def parse_network(text: str) -> RoadNetwork:
    header = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            m = _HEADER_RE.match(line)
            if m is None:
                raise NetworkFormatError(f"expected header 'V=<int> E=<int> [F=<int>]', got {line!r}", lineno)
            header = (int(m.group(1)), int(m.group(2)), int(m.group(3) or 0))
            continue
        rows.append((lineno, line.split()))
    if header is None:
        raise NetworkFormatError("missing header line")
    V, E, F = header
    if len(rows) != E:
        raise NetworkFormatError(f"header declares E={E} but found {len(rows)} edge lines")

    edges = []
    for lineno, parts in rows:
        if len(parts) != 3 + F:
            raise NetworkFormatError(f"expected {3 + F} fields, got {len(parts)}", lineno)
        try:
            o, d = int(parts[0]), int(parts[1])
            values = [float(p) for p in parts[2:]]
        except ValueError as exc:
            raise NetworkFormatError(str(exc), lineno) from None
        for node in (o, d):
            if node == 0:
                raise NetworkValidationError(f"line {lineno}: node id 0 is reserved for the unobserved token")
            if not 1 <= node <= V:
                raise NetworkValidationError(f"line {lineno}: node id {node} outside 1..{V}")
        if not values[0] > 0:
            raise NetworkValidationError(f"line {lineno}: weight must be positive, got {values[0]}")
        edges.append(Edge(o, d, values[0], tuple(values[1:])))
    names = tuple(f"f{i + 1}" for i in range(F))
    return RoadNetwork(V, tuple(edges), names)


def load_network(path: str | Path) -> RoadNetwork:
    return parse_network(Path(path).read_text(encoding="utf-8"))


def format_network(net: RoadNetwork) -> str:
    F = len(net.feature_names)
    head = f"V={net.node_count} E={net.edge_count}" + (f" F={F}" if F else "")
    lines = [head]
    for e in net.edges:
        vals = [repr(float(e.weight))] + [repr(float(f)) for f in e.features]
        lines.append(" ".join([str(e.origin), str(e.destination), *vals]))
    return "\n".join(lines) + "\n"


def save_network(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(format_network(net), encoding="utf-8")


def load_coordinates(path: str | Path) -> dict[int, tuple[float, float]]:
    """Read a node annex file of `node x y` lines."""
    coords = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise NetworkFormatError(f"expected 'node x y', got {line!r}", lineno)
        coords[int(parts[0])] = (float(parts[1]), float(parts[2]))
    return coords


def grid_network(rows: int, cols: int, weight: float = 1.0,
                 weights: Iterable[float] | None = None) -> tuple[RoadNetwork, dict[int, tuple[float, float]]]:
    """Bidirectional grid; node (r, c) gets id r*cols + c + 1."""
    pairs = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c + 1
            if c + 1 < cols:
                pairs += [(u, u + 1), (u + 1, u)]
            if r + 1 < rows:
                pairs += [(u, u + cols), (u + cols, u)]
    pairs.sort()
    ws = [weight] * len(pairs) if weights is None else list(weights)
    edges = tuple(Edge(o, d, float(w)) for (o, d), w in zip(pairs, ws))
    coords = {r * cols + c + 1: (float(c), float(r)) for r in range(rows) for c in range(cols)}
    return RoadNetwork(rows * cols, edges), coords


# --------------------------------------------------------------------------
# discretization and adjacency tables


@dataclass(frozen=True)
class DiscretizationSpec:
    """Equal-width binning of [lo, hi] onto 1..K; bin 0 marks an absent slot.

    ``bins=None`` falls back to the default of 30. ``policy='categorical'``
    passes integer codes 1..K through unchanged.
    """

    lo: float
    hi: float
    bins: int | None = None
    policy: str = "equal-width"

    def __post_init__(self):
        if self.policy not in ("equal-width", "categorical"):
            raise ValueError(f"unknown discretization policy {self.policy!r}")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.bins is not None and self.bins < 1:
            raise ValueError("bins must be positive")

    @property
    def K(self) -> int:
        return DEFAULT_BINS if self.bins is None else self.bins

    @classmethod
    def fit(cls, values: Sequence[float], bins: int | None = None) -> "DiscretizationSpec":
        lo, hi = float(np.min(values)), float(np.max(values))
        if lo == hi:
            hi = lo + 1.0
        return cls(lo, hi, bins)


def discretize(value: float, spec: DiscretizationSpec) -> int:
    K = spec.K
    if spec.policy == "categorical":
        return int(min(K, max(1, round(value))))
    if value <= spec.lo:
        return 1
    if value >= spec.hi:
        return K
    return min(K, 1 + math.floor(K * (value - spec.lo) / (spec.hi - spec.lo)))


@dataclass(frozen=True)
class AdjacencyTables:
    """Neighbour table ``A0`` and slot-aligned feature tables.

    Tables are ``(V, L)`` for a shared network or ``(B, V, L)`` for
    per-sample overrides. ``features[i]`` holds bin indices when
    ``bins[i] > 0``, else raw continuous values (0 in padding slots).
    """

    A0: np.ndarray
    features: tuple[np.ndarray, ...]
    bins: tuple[int, ...]

    @property
    def L(self) -> int:
        return self.A0.shape[-1]

    @property
    def M(self) -> int:
        return len(self.features)

    @property
    def V(self) -> int:
        return self.A0.shape[-2]

    @property
    def slot_mask(self) -> np.ndarray:
        return self.A0 != 0


def _feature_columns(net: RoadNetwork) -> list[np.ndarray]:
    cols = [net.weights]
    for k in range(len(net.feature_names)):
        cols.append(np.array([e.features[k] for e in net.edges], dtype=np.float64))
    return cols


def build_adjacency_tables(net: RoadNetwork, specs: Sequence[DiscretizationSpec | None] | None = None,
                           weights: np.ndarray | None = None) -> AdjacencyTables:
    """Build ``A0`` plus one table per edge feature (weight first).

    ``specs[i] is None`` keeps feature ``i`` continuous. Passing a 2-D
    ``weights`` array (B, E) yields per-sample tables for the weight feature.
    """
    columns = _feature_columns(net)
    if specs is None:
        specs = [None] * len(columns)
    if len(specs) != len(columns):
        raise ValueError(f"need one spec per feature ({len(columns)}), got {len(specs)}")

    V = net.node_count
    deg = net.out_degree()
    L = max(1, int(deg.max()))
    order = sorted(range(net.edge_count), key=lambda i: (net.edges[i].origin, net.edges[i].destination))
    rows = np.empty(net.edge_count, dtype=np.int64)
    slots = np.empty(net.edge_count, dtype=np.int64)
    fill = np.zeros(V + 1, dtype=np.int64)
    for i in order:
        o = net.edges[i].origin
        rows[i], slots[i] = o - 1, fill[o]
        fill[o] += 1

    A0 = np.zeros((V, L), dtype=np.int64)
    A0[rows, slots] = net.destinations

    def table(values: np.ndarray, spec: DiscretizationSpec | None) -> np.ndarray:
        if spec is None:
            out = np.zeros(values.shape[:-1] + (V, L), dtype=np.float64)
            out[..., rows, slots] = values
            return out
        if spec.policy == "equal-width":
            n_out = int(np.sum((values < spec.lo) | (values > spec.hi)))
            if n_out:
                log.warning("%d feature values outside [%g, %g] clamped", n_out, spec.lo, spec.hi)
        binned = np.vectorize(lambda x: discretize(x, spec), otypes=[np.int64])(values)
        out = np.zeros(values.shape[:-1] + (V, L), dtype=np.int64)
        out[..., rows, slots] = binned
        return out

    feats = []
    for k, (col, spec) in enumerate(zip(columns, specs)):
        if k == 0 and weights is not None:
            col = np.asarray(weights, dtype=np.float64)
        feats.append(table(col, spec))
    if weights is not None and np.ndim(weights) == 2:
        B = weights.shape[0]
        A0 = np.broadcast_to(A0, (B, V, L)).copy()
        feats = [f if f.ndim == 3 else np.broadcast_to(f, (B, V, L)).copy() for f in feats]
    bins = tuple(0 if s is None else s.K for s in specs)
    return AdjacencyTables(A0, tuple(feats), bins)


def check_adjacency(net: RoadNetwork, tables: AdjacencyTables) -> None:
    """Raise AssertionError when an AdjacencyTables invariant fails."""
    A0 = tables.A0 if tables.A0.ndim == 2 else tables.A0[0]
    deg = net.out_degree()
    assert tables.L == max(1, int(deg.max())), "L must equal the maximum out-degree"
    for v in range(1, net.node_count + 1):
        row = A0[v - 1]
        nz = row[row != 0]
        assert len(nz) == deg[v], f"row {v}: {len(nz)} neighbours, out-degree {deg[v]}"
        for d in nz:
            assert (v, int(d)) in net.edge_index, f"row {v}: ({v},{d}) is not an edge"
    for t in tables.features:
        assert np.all((t != 0) <= (tables.A0 != 0)), "feature present in an absent slot"
        if np.issubdtype(t.dtype, np.integer):
            assert np.all((t != 0) == (tables.A0 != 0)), "feature table misaligned with A0"


def edges_from_adjacency(A0: np.ndarray) -> set[tuple[int, int]]:
    return {(v + 1, int(d)) for v, row in enumerate(A0) for d in row if d != 0}
