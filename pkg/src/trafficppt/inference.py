"""From trajectory probabilities to per-road expected volumes.

Column 0 of a probability tensor is the off-network/unobserved class and
never contributes to an edge.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .road_graph import RoadNetwork

log = logging.getLogger(__name__)

DENOM_EPS = 1e-12


class TrajectoryDataError(ValueError):
    pass


def one_hot_probabilities(trajs: np.ndarray, V: int) -> np.ndarray:
    trajs = np.asarray(trajs)
    Y = np.zeros(trajs.shape + (V + 1,))
    np.put_along_axis(Y, trajs[..., None], 1.0, axis=-1)
    return Y


def edge_probability(Y: np.ndarray, net: RoadNetwork) -> np.ndarray:
    """(B, T, V+1) node probabilities -> (B, T, E) edge occupancy.

    Transition plus dwell for t < T; the last step has no successor row and
    keeps only the dwell term, with the last row standing in for step T+1.
    """
    Y = np.asarray(Y, dtype=np.float64)
    o, d = net.origins, net.destinations
    Yo = Y[:, :, o]
    out = np.empty(Y.shape[:2] + (len(o),))
    out[:, :-1] = Yo[:, :-1] * (Y[:, 1:, d] + Yo[:, 1:])
    out[:, -1] = Yo[:, -1] ** 2
    return out


def on_network_probability(Y: np.ndarray) -> np.ndarray:
    """P(vehicle on the network at t and at t+1), (B, T); last step squared."""
    on = 1.0 - np.asarray(Y, dtype=np.float64)[..., 0]
    out = np.empty_like(on)
    out[:, :-1] = on[:, :-1] * on[:, 1:]
    out[:, -1] = on[:, -1] ** 2
    return out


def vehicle_contributions(dotY: np.ndarray, on_network: np.ndarray | None = None) -> np.ndarray:
    """Per-vehicle normalised edge shares, (B, T, E)."""
    denom = dotY.sum(axis=-1, keepdims=True)
    live = denom > DENOM_EPS
    share = np.where(live, dotY / np.where(live, denom, 1.0), 0.0)
    if on_network is not None:
        share = share * on_network[..., None]
    return share


def volume(dotY: np.ndarray, on_network: np.ndarray | None = None) -> np.ndarray:
    """Expected vehicles per edge and step, (E, T).

    Each vehicle's edge probabilities are normalised to one unit per step.
    Passing ``on_network`` scales that unit by the vehicle's on-network
    probability instead of always counting it in full.
    """
    share = vehicle_contributions(dotY, on_network)
    # fixed-order reduction over vehicles keeps results bit-stable
    vol = np.zeros(share.shape[1:])
    for b in range(share.shape[0]):
        vol += share[b]
    return vol.T.copy()


def predict_volume(Y: np.ndarray, net: RoadNetwork, exclude_offnetwork: bool = False) -> np.ndarray:
    on = on_network_probability(Y) if exclude_offnetwork else None
    return volume(edge_probability(Y, net), on)


def volume_oracle(trajs: np.ndarray, net: RoadNetwork) -> np.ndarray:
    """Count vehicles per edge and step straight from complete trajectories.

    A vehicle at token u is on edge (u, v) where v is the next distinct
    token; the arrival step and padding count for nothing.
    """
    trajs = np.asarray(trajs)
    B, T = trajs.shape
    vol = np.zeros((net.edge_count, T))
    for b in range(B):
        row = trajs[b]
        nxt = 0  # next distinct token after the current run
        for t in range(T - 1, -1, -1):
            u = int(row[t])
            if t + 1 < T and row[t + 1] != u:
                nxt = int(row[t + 1])
            if u == 0 or nxt == 0:
                continue
            key = (u, nxt)
            if key not in net.edge_index:
                raise TrajectoryDataError(f"vehicle {b}: consecutive tokens {key} are not an edge")
            vol[net.edge_index[key] - 1, t] += 1.0
    return vol


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


# --------------------------------------------------------------------------
# files


def write_volume_csv(vol: np.ndarray, net: RoadNetwork, path: str | Path) -> None:
    E, T = vol.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", "origin", "destination", *(f"t{t + 1}" for t in range(T))])
        for i, e in enumerate(net.edges):
            w.writerow([i + 1, e.origin, e.destination, *(f"{x:.6f}" for x in vol[i])])


def read_volume_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["edge", "origin", "destination"]:
        raise ValueError(f"{path}: not a volume CSV")
    return np.array([[float(x) for x in r[3:]] for r in rows[1:]], dtype=np.float64)


def write_totals_csv(vol: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "total_volume"])
        for t, s in enumerate(vol.sum(axis=0)):
            w.writerow([t + 1, f"{s:.6f}"])


def volume_geojson(vol: np.ndarray, net: RoadNetwork, coords: dict[int, tuple[float, float]]) -> dict:
    features = []
    for i, e in enumerate(net.edges):
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [list(coords[e.origin]), list(coords[e.destination])]},
            "properties": {"edge": i + 1, "origin": e.origin, "destination": e.destination,
                           "volume": [round(float(x), 6) for x in vol[i]],
                           "mean_volume": round(float(vol[i].mean()), 6)},
        })
    return {"type": "FeatureCollection", "features": features}


def export_volumes(vol: np.ndarray, net: RoadNetwork, coords: dict | None, out_dir: str | Path,
                   stem: str = "volume") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / f"{stem}_per_road.csv", out / f"{stem}_per_time.csv"]
    write_volume_csv(vol, net, written[0])
    write_totals_csv(vol, written[1])
    missing = None if coords is None else [n for n in range(1, net.node_count + 1) if n not in coords]
    if coords is None or missing:
        log.warning("node coordinates unavailable%s; heatmap skipped",
                    f" for {len(missing)} nodes" if missing else "")
        return written
    geo = out / f"{stem}_heatmap.geojson"
    geo.write_text(json.dumps(volume_geojson(vol, net, coords), sort_keys=True), encoding="utf-8")
    written.append(geo)
    return written
