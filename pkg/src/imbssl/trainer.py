"""SimCLR / SimSiam pre-training and per-cluster expert training."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AugmentationPolicy, batch_views
from .dataset import LabeledDataset
from .errors import PipelineError
from .nn_core import ModelBundle, encode, predict, project, save_checkpoint
from .objectives import nt_xent, pair_rows, simsiam_loss
from .optimizers import (
    SIMSIAM_OPTIMIZER,
    OptimizerConfig,
    ScheduleState,
    build_optimizer,
    cosine_lr,
    set_lr,
)

log = logging.getLogger(__name__)

METHODS = ("simclr", "simsiam")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int = 512
    optimizer: OptimizerConfig = SIMSIAM_OPTIMIZER
    method: str = "simsiam"
    seed: int = 0
    temperature: float = 0.5
    per_step_lr: bool = False

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    extra: dict[str, list[float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.losses)

    def write_csv(self, path, columns: Sequence[str] = ()) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", *columns, "lr"])
            for e, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([e, repr(loss), *(repr(self.extra[c][e]) for c in columns), repr(lr)])
        return path


def read_log_csv(path) -> list[dict[str, float]]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; the last partial batch is kept. A trailing batch of
    one record is folded into its predecessor (batch norm needs two rows)."""
    order = rng.permutation(n)
    bs = min(batch_size, n)
    batches = [order[i:i + bs] for i in range(0, n, bs)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def lr_for(schedule: TrainSchedule, base_lr: float, epoch: int, step: int, steps_per_epoch: int) -> float:
    if schedule.per_step_lr:
        total = schedule.epochs * steps_per_epoch
        return cosine_lr(ScheduleState(epoch * steps_per_epoch + step, total, base_lr))
    return cosine_lr(ScheduleState(epoch, schedule.epochs, base_lr))


def method_parameters(bundle: ModelBundle, method: str) -> list[torch.nn.Parameter]:
    net = bundle.net
    params = list(net.backbone.parameters()) + list(net.projector.parameters())
    if method == "simsiam":
        params += list(net.predictor.parameters())
    return params


def ssl_loss(bundle: ModelBundle, method: str, v1: torch.Tensor, v2: torch.Tensor,
             temperature: float = 0.5) -> torch.Tensor:
    """Objective for one two-view batch; both views share one forward pass."""
    z = project(bundle, encode(bundle, torch.cat([v1, v2])))
    z1, z2 = z.chunk(2)
    if method == "simclr":
        return nt_xent(pair_rows(z1, z2), temperature)
    p1, p2 = predict(bundle, z).chunk(2)
    return simsiam_loss(p1, p2, z1, z2)


def pretrain(method: str, dataset: LabeledDataset, bundle: ModelBundle, schedule: TrainSchedule,
             policy: AugmentationPolicy | None = None, log_path=None, checkpoint_dir=None,
             checkpoint_every: int = 0,
             on_epoch: Callable[[int, float], None] | None = None) -> tuple[ModelBundle, TrainLog]:
    """Train ``bundle`` in place with the method's objective on two-view batches."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if len(dataset) == 0:
        raise PipelineError("cannot pre-train on an empty dataset")
    if dataset.images.shape[-1] != 3:
        raise PipelineError("bundle expects 3-channel images")
    policy = policy or AugmentationPolicy()
    n = len(dataset)
    base_lr = schedule.optimizer.effective_lr(min(schedule.batch_size, n))
    params = method_parameters(bundle, method)
    opt = build_optimizer(params, schedule.optimizer, base_lr)
    trace = TrainLog()
    bundle.train()
    for epoch in range(schedule.epochs):
        rng = epoch_rng(schedule.seed, epoch)
        batches = epoch_batches(n, schedule.batch_size, rng)
        total, lr = 0.0, base_lr
        for step, idx in enumerate(batches):
            lr = lr_for(schedule, base_lr, epoch, step, len(batches))
            set_lr(opt, lr)
            v1, v2 = batch_views(dataset.images[idx], policy, rng, 2)
            loss = ssl_loss(bundle, method, v1, v2, schedule.temperature)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            bundle.step += 1
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise PipelineError(f"non-finite loss at epoch {epoch}")
        bundle.epoch += 1
        trace.losses.append(epoch_loss)
        trace.lrs.append(lr)
        log.info("%s epoch %d/%d loss %.4f lr %.4g", method, epoch + 1, schedule.epochs, epoch_loss, lr)
        if on_epoch:
            on_epoch(epoch, epoch_loss)
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(bundle, Path(checkpoint_dir) / f"{method}_epoch{epoch + 1}.ckpt")
    if log_path:
        trace.write_csv(log_path)
    return bundle, trace


def expert_seed(seed: int, k: int) -> int:
    return seed + 7919 * (k + 1)


def train_experts(base: ModelBundle, partitions: Sequence[LabeledDataset], schedule: TrainSchedule,
                  policy: AugmentationPolicy | None = None, log_dir=None
                  ) -> tuple[list[ModelBundle], list[TrainLog]]:
    """Warm-start one expert per partition from ``base`` and pre-train it there."""
    if not partitions:
        raise PipelineError("need at least one partition")
    for k, part in enumerate(partitions):
        if len(part) == 0:
            raise PipelineError(f"partition {k} is empty")
    experts, logs = [], []
    for k, part in enumerate(partitions):
        expert = base.clone()
        expert.epoch = expert.step = 0
        log_path = Path(log_dir) / f"expert_{k + 1}.csv" if log_dir else None
        sched = replace(schedule, seed=expert_seed(schedule.seed, k))
        expert, trace = pretrain(schedule.method, part, expert, sched, policy, log_path)
        experts.append(expert)
        logs.append(trace)
    return experts, logs
