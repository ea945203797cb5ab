"""Vanilla shortest-path trajectory simulator.

Each vehicle gets an origin/destination pair and ``N + 1`` trips, every trip
routed on an independently perturbed copy of the road weights. Travel time on
an edge is encoded by repeating its origin token.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .road_graph import RoadNetwork


class GenerationError(RuntimeError):
    pass


class UnreachableError(GenerationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    vehicles: int = 500
    histories: int = 4
    horizon: int = 60
    sigma: float = 0.0
    speed_unit: float = 1.0
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.vehicles < 1:
            raise ValueError("vehicles must be positive")
        if self.histories < 0:
            raise ValueError("histories must be non-negative")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if not self.speed_unit > 0:
            raise ValueError("speed_unit must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class VehicleRecord:
    vehicle_id: int
    od: tuple[int, int]
    ground_truth: np.ndarray
    observation_source: np.ndarray
    histories: list[np.ndarray]
    truncated: bool = False
    # perturbed weights per trajectory: index 0 = observation, then histories
    weights: list[np.ndarray] = field(default_factory=list, repr=False)


# --------------------------------------------------------------------------
# reachability and OD sampling


def reachable_from(net: RoadNetwork, origin: int) -> set[int]:
    succ = net.successors()
    seen = {origin}
    queue = deque([origin])
    while queue:
        u = queue.popleft()
        for v, _ in succ[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def sample_od_pairs(net: RoadNetwork, count: int, rng: np.random.Generator,
                    max_retries: int = 1000) -> list[tuple[int, int]]:
    """Rejection-sample ordered pairs ``o != d`` with ``d`` reachable from ``o``.

    Rejecting whole pairs keeps the accepted pairs uniform over all
    reachable pairs.
    """
    V = net.node_count
    if V < 2:
        raise GenerationError("need at least 2 nodes to sample OD pairs")
    cache: dict[int, set[int]] = {}
    pairs = []
    for _ in range(count):
        for _attempt in range(max_retries):
            o = int(rng.integers(1, V + 1))
            d = int(rng.integers(1, V))
            if d >= o:
                d += 1
            if o not in cache:
                cache[o] = reachable_from(net, o)
            if d in cache[o]:
                pairs.append((o, d))
                break
        else:
            raise GenerationError(
                f"no reachable destination found after {max_retries} draws (last origin {o})")
    return pairs


# --------------------------------------------------------------------------
# weights and routing


def perturb_weights(net: RoadNetwork, sigma: float, rng: np.random.Generator) -> RoadNetwork:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return net
    eps = rng.normal(0.0, sigma, size=net.edge_count)
    return net.with_weights(net.weights * np.exp(eps))


def shortest_path(net: RoadNetwork, origin: int, destination: int) -> tuple[list[int], float]:
    """Dijkstra; equal distances settle the smaller node id first."""
    succ = net.successors()
    dist = {origin: 0.0}
    prev: dict[int, int] = {}
    done = set()
    heap = [(0.0, origin)]
    while heap:
        du, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == destination:
            break
        for v, w in succ[u]:
            nd = du + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if destination not in done:
        raise UnreachableError(f"node {destination} is not reachable from {origin}")
    path = [destination]
    while path[-1] != origin:
        path.append(prev[path[-1]])
    path.reverse()
    return path, dist[destination]


def dwell_steps(weight: float, speed_unit: float) -> int:
    # round half up so 2.5 -> 3 regardless of banker's rounding
    return max(1, int(math.floor(weight / speed_unit + 0.5)))


def encode_path(net: RoadNetwork, path: Sequence[int], horizon: int,
                speed_unit: float) -> tuple[np.ndarray, bool]:
    tokens: list[int] = []
    for u, v in zip(path[:-1], path[1:]):
        w = net.edges[net.edge_index[(u, v)] - 1].weight
        tokens.extend([u] * dwell_steps(w, speed_unit))
    tokens.append(path[-1])
    truncated = len(tokens) > horizon
    out = np.zeros(horizon, dtype=np.int64)
    n = min(len(tokens), horizon)
    out[:n] = tokens[:n]
    return out, truncated


def shortest_path_trajectory(net: RoadNetwork, origin: int, destination: int,
                             config: SimConfig) -> np.ndarray:
    return _trajectory(net, origin, destination, config)[0]


def _trajectory(net, origin, destination, config):
    if origin == destination:
        out = np.zeros(config.horizon, dtype=np.int64)
        out[0] = origin
        return out, False
    path, _ = shortest_path(net, origin, destination)
    return encode_path(net, path, config.horizon, config.speed_unit)


def vehicle_rng(seed: int, vehicle_id: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, vehicle_id])


def simulate_vehicle(net: RoadNetwork, config: SimConfig, vehicle_id: int) -> VehicleRecord:
    rng = vehicle_rng(config.seed, vehicle_id)
    (od,) = sample_od_pairs(net, 1, rng, config.max_retries)
    trips, weights, truncated = [], [], False
    for _ in range(config.histories + 1):
        perturbed = perturb_weights(net, config.sigma, rng)
        traj, trunc = _trajectory(perturbed, od[0], od[1], config)
        trips.append(traj)
        weights.append(perturbed.weights)
        truncated |= trunc
    obs_idx = int(rng.integers(len(trips)))
    order = [obs_idx] + [i for i in range(len(trips)) if i != obs_idx]
    return VehicleRecord(
        vehicle_id=vehicle_id,
        od=od,
        ground_truth=trips[obs_idx].copy(),
        observation_source=trips[obs_idx].copy(),
        histories=[trips[i] for i in order[1:]],
        truncated=truncated,
        weights=[weights[i] for i in order],
    )


def generate_fleet(net: RoadNetwork, config: SimConfig, first_id: int = 0) -> list[VehicleRecord]:
    records = [simulate_vehicle(net, config, vid) for vid in range(first_id, first_id + config.vehicles)]
    records.sort(key=lambda r: r.vehicle_id)
    return records


# --------------------------------------------------------------------------
# trajectory files


def _row(vid, role, idx, tokens):
    return " ".join([str(vid), role, str(idx), *map(str, tokens.tolist())])


def format_fleet(records: Iterable[VehicleRecord]) -> str:
    lines = []
    for r in sorted(records, key=lambda r: r.vehicle_id):
        lines.append(_row(r.vehicle_id, "gt", 0, r.ground_truth))
        lines.append(_row(r.vehicle_id, "obs", 0, r.observation_source))
        for k, h in enumerate(r.histories):
            lines.append(_row(r.vehicle_id, "his", k, h))
    return "\n".join(lines) + "\n"


def write_fleet(records: Sequence[VehicleRecord], path: str | Path) -> None:
    Path(path).write_text(format_fleet(records), encoding="utf-8")


def write_fleet_weights(records: Sequence[VehicleRecord], path: str | Path) -> None:
    """One line per trajectory: ``vehicle_id role index w1 ... wE``."""
    lines = []
    for r in sorted(records, key=lambda r: r.vehicle_id):
        for k, w in enumerate(r.weights):
            role, idx = ("obs", 0) if k == 0 else ("his", k - 1)
            lines.append(" ".join([str(r.vehicle_id), role, str(idx), *(f"{x:.17g}" for x in w)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_fleet(path: str | Path) -> list[VehicleRecord]:
    by_id: dict[int, dict] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) < 4 or parts[1] not in ("gt", "obs", "his"):
            raise ValueError(f"{path}:{lineno}: malformed trajectory line")
        vid, role, idx = int(parts[0]), parts[1], int(parts[2])
        tokens = np.array([int(p) for p in parts[3:]], dtype=np.int64)
        entry = by_id.setdefault(vid, {"his": {}})
        if role == "his":
            entry["his"][idx] = tokens
        else:
            entry[role] = tokens
    records = []
    for vid in sorted(by_id):
        e = by_id[vid]
        gt = e.get("gt", e.get("obs"))
        if gt is None:
            raise ValueError(f"{path}: vehicle {vid} has no gt/obs trajectory")
        obs = e.get("obs", gt)
        nz = gt[gt != 0]
        od = (int(nz[0]), int(nz[-1])) if len(nz) else (0, 0)
        records.append(VehicleRecord(vid, od, gt, obs, [e["his"][k] for k in sorted(e["his"])]))
    return records
