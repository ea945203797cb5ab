"""Stage helpers shared by the command line and the experiment harnesses."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import inference as inf
from .config import read_sections
from .dataset import CheckpointSet, SampleSet, finetune_mask, select_checkpoints
from .model import ModelConfig, TrafficPPT, adjacency_for
from .road_graph import RoadNetwork, build_adjacency_tables, load_coordinates, load_network
from .simulator import SimConfig, generate_fleet
from .training import TrainConfig, TrainResult, finetune, pretrain

TEST_ID_OFFSET = 1_000_000


def data_path(name: str) -> Path:
    return Path(str(resources.files("trafficppt") / "data" / name))


def toy_network() -> tuple[RoadNetwork, dict[int, tuple[float, float]]]:
    return load_network(data_path("toy_grid_5x5.net")), load_coordinates(data_path("toy_grid_5x5.coords"))


def toy_bundle() -> dict[str, dict[str, str]]:
    return read_sections(data_path("toy.cfg"))


def sim_config(values: dict, **overrides) -> SimConfig:
    kinds = {"vehicles": int, "histories": int, "horizon": int, "sigma": float,
             "speed_unit": float, "seed": int, "max_retries": int}
    kwargs = {}
    for k, v in values.items():
        if k not in kinds:
            raise ValueError(f"unknown simulate config key {k!r}")
        kwargs[k] = kinds[k](v)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig(**kwargs)


def simulate_split(net: RoadNetwork, config: SimConfig, test_vehicles: int) -> tuple[SampleSet, SampleSet]:
    """Training fleet plus an independent test fleet with disjoint vehicle ids."""
    train = SampleSet.from_records(generate_fleet(net, config))
    test = SampleSet.from_records(generate_fleet(net, replace(config, vehicles=test_vehicles),
                                                 first_id=TEST_ID_OFFSET))
    return train, test


def model_config(values: dict, net: RoadNetwork, T: int, N: int, **overrides) -> ModelConfig:
    """Resolve a model config whose V, T, L and N follow the data."""
    merged = dict(values)
    merged.update(V=net.node_count, T=T, L=build_adjacency_tables(net).L, N=N)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_mapping(merged)


def train_stage(stage: str, samples: SampleSet, net: RoadNetwork, mcfg: ModelConfig, tcfg: TrainConfig,
                init: str | Path | None = None, eval_set: SampleSet | None = None,
                checkpoints: CheckpointSet | None = None) -> TrainResult:
    model = TrafficPPT(mcfg)
    if init:
        model.load_backbone(init)
    A = adjacency_for(net, mcfg)
    if stage == "pretrain":
        return pretrain(samples, model, A, tcfg, eval_set)
    return finetune(samples, model, A, tcfg, eval_set, checkpoints)


@dataclass
class VolumeEvaluation:
    mae: float
    baseline_mae: float
    predicted: np.ndarray
    truth: np.ndarray
    baseline: np.ndarray
    seconds: float


def evaluate_volumes(model: TrafficPPT, net: RoadNetwork, samples: SampleSet, checkpoints: CheckpointSet,
                     exclude_offnetwork: bool = False) -> VolumeEvaluation:
    """Predict per-road volumes from checkpoint observations and score them.

    The baseline counts only what the checkpoints saw.
    """
    start = time.perf_counter()
    obs = finetune_mask(samples.observations, checkpoints, reference=samples.targets)
    Y = model.predict(obs, samples.histories, adjacency_for(net, model.config))
    predicted = inf.predict_volume(Y, net, exclude_offnetwork)
    seconds = time.perf_counter() - start
    truth = inf.volume_oracle(samples.targets, net)
    baseline = inf.predict_volume(inf.one_hot_probabilities(obs, net.node_count), net)
    return VolumeEvaluation(inf.mae(predicted, truth), inf.mae(baseline, truth), predicted, truth, baseline, seconds)


def draw_checkpoints(V: int, alpha: float, seed: int) -> CheckpointSet:
    return select_checkpoints(V, alpha, np.random.default_rng([seed, 3]))


def format_checkpoints(cps: CheckpointSet) -> str:
    return f"alpha={cps.alpha!r}\nnodes={' '.join(map(str, sorted(cps.nodes)))}\n"


def parse_checkpoints(text: str) -> CheckpointSet:
    values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    try:
        nodes = frozenset(int(n) for n in values["nodes"].split())
        return CheckpointSet(nodes, float(values["alpha"]))
    except KeyError as err:
        raise ValueError(f"checkpoint set file lacks {err.args[0]!r}") from None
