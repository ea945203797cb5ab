"""Turn complete trajectories into masked training samples."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .road_graph import RoadNetwork

PAD_WEIGHT = 1e-4


def rescale_trajectory(traj: Sequence[int], T: int) -> np.ndarray:
    """Nearest-neighbour resample of the non-padding prefix onto ``T`` steps."""
    tokens = np.asarray(traj, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot rescale an empty trajectory")
    nz = np.flatnonzero(tokens)
    prefix = tokens[: nz[-1] + 1] if nz.size else tokens
    n = len(prefix)
    idx = (np.arange(T) * n) // T
    return prefix[idx].copy()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CheckpointSet:
    nodes: frozenset[int]
    alpha: float

    def as_mask(self, V: int) -> np.ndarray:
        keep = np.zeros(V + 1, dtype=bool)
        keep[list(self.nodes)] = True
        return keep


def select_checkpoints(net: RoadNetwork | int, alpha: float, rng: np.random.Generator) -> CheckpointSet:
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    V = net if isinstance(net, int) else net.node_count
    k = _round_half_up(alpha * V)
    nodes = rng.choice(np.arange(1, V + 1), size=k, replace=False)
    return CheckpointSet(frozenset(int(n) for n in nodes), alpha)


def pretrain_mask(traj: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Hide each non-padding token independently with probability 1 - alpha.

    Works on a single trajectory or a stack of them.
    """
    traj = np.asarray(traj)
    drop = rng.random(traj.shape) >= alpha
    return np.where(drop, 0, traj)


def last_real_index(traj: np.ndarray) -> np.ndarray:
    """Index of the last non-zero token along the last axis (-1 when none)."""
    traj = np.asarray(traj)
    T = traj.shape[-1]
    nz = traj != 0
    rev = np.argmax(nz[..., ::-1], axis=-1)
    return np.where(nz.any(axis=-1), T - 1 - rev, -1)


def finetune_mask(traj: np.ndarray, cps: CheckpointSet, mask_final: bool = True,
                  reference: np.ndarray | None = None) -> np.ndarray:
    """Keep only checkpoint tokens, then blank the final real step.

    ``reference`` is the complete trajectory that defines the final step; it
    defaults to ``traj`` itself. Blanking is keyed on ``reference`` so the
    operation is idempotent.
    """
    traj = np.asarray(traj)
    ref = traj if reference is None else np.asarray(reference)
    V = int(max(traj.max(initial=0), max(cps.nodes, default=0)))
    keep = cps.as_mask(V)
    out = np.where(keep[traj], traj, 0)
    if mask_final:
        last = last_real_index(ref)
        flat = out.reshape(-1, out.shape[-1])
        for row, idx in zip(flat, np.atleast_1d(last).reshape(-1)):
            if idx >= 0:
                row[idx] = 0
    return out


def assemble_record(trajs: Sequence[np.ndarray], N: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    if len(trajs) == 0:
        raise ValueError("need at least one trajectory")
    n = len(trajs)
    obs = int(rng.integers(n))
    if n >= N + 1:
        rest = [i for i in range(n) if i != obs]
        picks = rng.choice(len(rest), size=N, replace=False) if N else []
        his = [trajs[rest[i]] for i in picks]
    else:
        his = [trajs[int(i)] for i in rng.integers(n, size=N)]
    return trajs[obs], his


def one_hot_target(traj: np.ndarray, V: int) -> tuple[np.ndarray, np.ndarray]:
    traj = np.asarray(traj)
    if traj.size and traj.max() > V:
        raise ValueError(f"token {traj.max()} exceeds V={V}")
    target = np.zeros(traj.shape + (V + 1,), dtype=np.float64)
    np.put_along_axis(target, traj[..., None], 1.0, axis=-1)
    return target, pad_weights(traj)


def pad_weights(traj: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(traj) == 0, PAD_WEIGHT, 1.0)


# --------------------------------------------------------------------------
# batched sample store


@dataclass
class SampleSet:
    """Aligned arrays for a set of vehicles.

    ``observations`` holds the unmasked observation source; masking is
    applied per stage by the trainer.
    """

    vehicle_ids: np.ndarray  # (B,)
    observations: np.ndarray  # (B, T)
    histories: np.ndarray  # (B, N, T)
    targets: np.ndarray  # (B, T) ground-truth tokens

    def __len__(self):
        return len(self.vehicle_ids)

    @property
    def T(self) -> int:
        return self.targets.shape[1]

    @property
    def N(self) -> int:
        return self.histories.shape[1]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.vehicle_ids[idx], self.observations[idx],
                         self.histories[idx], self.targets[idx])

    @classmethod
    def from_records(cls, records, T: int | None = None) -> "SampleSet":
        records = sorted(records, key=lambda r: r.vehicle_id)
        T = T or len(records[0].ground_truth)

        def fit(x):
            x = np.asarray(x)
            return x if len(x) == T else rescale_trajectory(x, T)

        N = len(records[0].histories)
        his = np.zeros((len(records), N, T), dtype=np.int64)
        for b, r in enumerate(records):
            for k, h in enumerate(r.histories):
                his[b, k] = fit(h)
        return cls(
            np.array([r.vehicle_id for r in records], dtype=np.int64),
            np.stack([fit(r.observation_source) for r in records]),
            his,
            np.stack([fit(r.ground_truth) for r in records]),
        )


def split_holdout(samples: SampleSet, fraction: float = 0.02) -> tuple[SampleSet, SampleSet]:
    """Stable train/held-out split keyed on a hash of the vehicle id."""
    ids = samples.vehicle_ids.astype(np.uint64)
    h = (ids * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(40)
    held = (h % np.uint64(10000)) < np.uint64(round(fraction * 10000))
    return samples.subset(~held), samples.subset(held)


def write_shard(path: str | Path, observations: np.ndarray, histories: np.ndarray,
                targets: np.ndarray) -> None:
    """Binary shard: int32 header (count, N, T), then per record obs, N histories, target."""
    B, N, T = histories.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", B, N, T))
        for b in range(B):
            block = np.concatenate([observations[b][None], histories[b], targets[b][None]])
            fh.write(block.astype("<i4").tobytes())


def read_shard(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    B, N, T = struct.unpack_from("<3i", data)
    arr = np.frombuffer(data, dtype="<i4", offset=12).reshape(B, N + 2, T).astype(np.int64)
    return arr[:, 0], arr[:, 1:N + 1], arr[:, N + 1]
