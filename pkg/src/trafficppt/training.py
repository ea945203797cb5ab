"""Pretraining and fine-tuning loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import (PAD_WEIGHT, CheckpointSet, SampleSet, finetune_mask, last_real_index, one_hot_target,
                      pretrain_mask, select_checkpoints)
from .model import TrafficPPT
from .road_graph import AdjacencyTables

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    alpha: float = 0.5
    batch_size: int = 50
    lr0: float = 0.01
    epochs: int = 100
    seed: int = 0
    checkpoint_path: str = ""
    eval_every: int = 0
    clip_norm: float = 5.0
    mask_final_pretrain: bool = False
    pad_weight: float = PAD_WEIGHT  # objective only; reported losses always use PAD_WEIGHT

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown training config key {key!r}")
            kind = kinds[key]
            if not isinstance(raw, str):
                kwargs[key] = raw
            elif kind == "bool":
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    eval_loss: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, epoch, train, evaluation, lr):
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.eval_loss.append(evaluation)
        self.lr.append(lr)

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "eval_loss", "lr"])
            for e, tr, ev, lr in zip(self.epochs, self.train_loss, self.eval_loss, self.lr):
                w.writerow([e, repr(tr), "" if ev is None else repr(ev), repr(lr)])


@dataclass
class Batch:
    observations: np.ndarray
    histories: np.ndarray
    targets: np.ndarray
    vehicle_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.targets)


def loss_terms(model: TrafficPPT, batch: Batch, A: AdjacencyTables | None,
               pad_weight: float = PAD_WEIGHT) -> tuple[nx.Tensor, int, float]:
    """Summed weighted cross-entropy, real (weight-1) step count, reported sum.

    The objective weights padding steps by ``pad_weight``; the reported sum
    always uses the standard 1e-4 so curves stay comparable.
    """
    target, weights = one_hot_target(batch.targets, model.config.V)
    target = target.astype(model.dtype)
    q = model.forward(batch.observations, batch.histories, A)
    loss = nx.masked_cross_entropy(q, target, weights.astype(model.dtype))
    reported = float(loss.value)
    if pad_weight != PAD_WEIGHT:
        objective = np.where(batch.targets == 0, pad_weight, 1.0).astype(model.dtype)
        loss = nx.masked_cross_entropy(q, target, objective)
    return loss, int(np.count_nonzero(batch.targets)), reported


def compute_loss(model: TrafficPPT, batch: Batch, A: AdjacencyTables | None) -> nx.Tensor:
    """Cross-entropy per real step; padding steps enter with weight 1e-4."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, real, _ = loss_terms(model, batch, A)
    return nx.scale(loss, 1.0 / max(real, 1))


def evaluate_loss(model: TrafficPPT, batch: Batch, A, batch_size: int = 256) -> float:
    total, real = 0.0, 0
    for s in range(0, len(batch), batch_size):
        sub = Batch(batch.observations[s:s + batch_size], batch.histories[s:s + batch_size],
                    batch.targets[s:s + batch_size])
        _, n, reported = loss_terms(model, sub, A)
        total += reported
        real += n
    return total / max(real, 1)


# --------------------------------------------------------------------------
# masking regimes


class PretrainMasker:
    """Fresh random masks every epoch."""

    def __init__(self, alpha: float, rng: np.random.Generator, mask_final: bool = False):
        self.alpha, self.rng, self.mask_final = alpha, rng, mask_final

    def __call__(self, samples: SampleSet) -> np.ndarray:
        obs = pretrain_mask(samples.observations, self.alpha, self.rng)
        if self.mask_final:
            last = last_real_index(samples.targets)
            rows = np.flatnonzero(last >= 0)
            obs[rows, last[rows]] = 0
        return obs


class CheckpointMasker:
    """The same checkpoint set for every epoch of a run."""

    def __init__(self, checkpoints: CheckpointSet, mask_final: bool = True):
        self.checkpoints, self.mask_final = checkpoints, mask_final

    def __call__(self, samples: SampleSet) -> np.ndarray:
        return finetune_mask(samples.observations, self.checkpoints, self.mask_final,
                             reference=samples.targets)


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: TrafficPPT
    curve: LossCurve
    checkpoints: CheckpointSet | None = None


def train(model: TrafficPPT, train_set: SampleSet, A: AdjacencyTables | None, config: TrainConfig,
          masker: Callable[[SampleSet], np.ndarray], eval_set: SampleSet | None = None,
          eval_masker: Callable[[SampleSet], np.ndarray] | None = None,
          rng: np.random.Generator | None = None) -> LossCurve:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = model.parameters()
    curve = LossCurve()
    eval_batch = None
    if eval_set is not None and len(eval_set):
        eval_obs = (eval_masker or masker)(eval_set)
        eval_batch = Batch(eval_obs, eval_set.histories, eval_set.targets)

    for epoch in range(config.epochs):
        lr = nx.cosine_lr(epoch, config.epochs, config.lr0)
        order = rng.permutation(len(train_set))
        shuffled = train_set.subset(order)
        observed = masker(shuffled)
        total, real = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            sl = slice(s, s + config.batch_size)
            batch = Batch(observed[sl], shuffled.histories[sl], shuffled.targets[sl], shuffled.vehicle_ids[sl])
            with nx.Tape() as tape:
                loss, n, value = loss_terms(model, batch, A, config.pad_weight)
                mean = nx.scale(loss, 1.0 / max(n, 1))
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}; batch vehicle ids "
                                    f"{batch.vehicle_ids.tolist()}")
            tape.backward(mean)
            nx.clip_grad_norm(params, config.clip_norm)
            nx.sgd_step(params, lr)
            total += value
            real += n
        evaluation = None
        last = epoch == config.epochs - 1
        if eval_batch is not None and (last or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            evaluation = evaluate_loss(model, eval_batch, A)
        curve.append(epoch, total / max(real, 1), evaluation, lr)
        log.info("epoch %d lr %.5f train %.4f eval %s", epoch, lr, curve.train_loss[-1], evaluation)
        if config.checkpoint_path and (last or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            model.save(config.checkpoint_path)
    return curve


def pretrain(samples: SampleSet, model: TrafficPPT, A: AdjacencyTables | None, config: TrainConfig,
             eval_set: SampleSet | None = None) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    masker = PretrainMasker(config.alpha, np.random.default_rng([config.seed, 1]), config.mask_final_pretrain)
    eval_masker = PretrainMasker(config.alpha, np.random.default_rng([config.seed, 2]), config.mask_final_pretrain)
    fixed_eval = None
    if eval_set is not None:
        fixed = eval_masker(eval_set)
        fixed_eval = lambda s: fixed
    curve = train(model, samples, A, config, masker, eval_set, fixed_eval, rng)
    return TrainResult(model, curve)


def finetune(samples: SampleSet, model: TrafficPPT, A: AdjacencyTables | None, config: TrainConfig,
             eval_set: SampleSet | None = None, checkpoints: CheckpointSet | None = None) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    if checkpoints is None:
        checkpoints = select_checkpoints(model.config.V, config.alpha, np.random.default_rng([config.seed, 3]))
    masker = CheckpointMasker(checkpoints)
    curve = train(model, samples, A, config, masker, eval_set, None, rng)
    return TrainResult(model, curve, checkpoints)
