"""Linear evaluation: a fresh linear classifier on top of a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentationPolicy, batch_views, eval_batch
from .dataset import LabeledDataset
from .errors import CorruptRecordError
from .nn_core import ModelBundle, encode, reset_classifier
from .optimizers import SGD, ScheduleState, cosine_lr, set_lr
from .trainer import epoch_rng


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment_train: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class EvalResult:
    accuracy: float
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def top1_accuracy(logits, labels) -> float:
    """Percent of rows whose argmax (first on ties) equals the label."""
    logits = np.asarray(logits.detach() if isinstance(logits, torch.Tensor) else logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(logits.argmax(1) == labels))


def _check_labels(ds: LabeledDataset, num_classes: int) -> None:
    if len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= num_classes):
        raise CorruptRecordError(f"label outside [0, {num_classes})")


def fit_linear_head(head: nn.Linear, features_for_epoch: Callable[[int, np.random.Generator], torch.Tensor],
                    labels: np.ndarray, cfg: EvalConfig) -> EvalResult:
    """SGD + cosine schedule on cross entropy; features come from a callback so
    the caller decides between cached and freshly augmented features."""
    y = torch.as_tensor(labels, dtype=torch.long, device=head.weight.device)
    n = len(y)
    opt = SGD(head.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    result = EvalResult(accuracy=float("nan"))
    head.train()
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, epoch)
        lr = cosine_lr(ScheduleState(epoch, cfg.epochs, cfg.lr))
        set_lr(opt, lr)
        feats = features_for_epoch(epoch, rng)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size], device=y.device)
            loss = F.cross_entropy(head(feats[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        result.losses.append(total / n)
        result.lrs.append(lr)
    return result


def linear_eval_features(train_x: torch.Tensor, train_y, test_x: torch.Tensor, test_y,
                         num_classes: int, cfg: EvalConfig) -> EvalResult:
    """Linear probe on fixed feature matrices."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        head = nn.Linear(train_x.shape[1], num_classes)
    result = fit_linear_head(head, lambda e, rng: train_x, np.asarray(train_y), cfg)
    with torch.no_grad():
        result.accuracy = top1_accuracy(head(test_x), test_y)
    return result


@torch.no_grad()
def _features(bundle: ModelBundle, images: np.ndarray, policy: AugmentationPolicy,
              rng: np.random.Generator | None, chunk: int = 1024) -> torch.Tensor:
    out = []
    for s in range(0, len(images), chunk):
        part = images[s:s + chunk]
        x = batch_views(part, policy, rng, 1)[0] if rng is not None else eval_batch(part, policy.mean, policy.std)
        out.append(encode(bundle, x))
    return torch.cat(out) if out else torch.zeros(0, bundle.dim)


def linear_eval(bundle: ModelBundle, train_ds: LabeledDataset, test_ds: LabeledDataset,
                cfg: EvalConfig = EvalConfig(), policy: AugmentationPolicy | None = None) -> EvalResult:
    """Train ``bundle``'s classifier on frozen eval-mode backbone features.

    The classifier is re-initialized; the backbone, projector and predictor
    are not touched.
    """
    _check_labels(train_ds, bundle.num_classes)
    _check_labels(test_ds, bundle.num_classes)
    policy = (policy or AugmentationPolicy()).crop_flip_only()
    reset_classifier(bundle, cfg.seed)
    head = bundle.net.classifier
    was_training = bundle.net.training
    bundle.eval()
    try:
        if cfg.augment_train:
            def feats(epoch, rng):
                return _features(bundle, train_ds.images, policy, rng)
        else:
            cached = _features(bundle, train_ds.images, policy, None)

            def feats(epoch, rng):
                return cached
        result = fit_linear_head(head, feats, train_ds.labels, cfg)
        head.eval()
        with torch.no_grad():
            logits = head(_features(bundle, test_ds.images, policy, None))
        result.accuracy = top1_accuracy(logits.cpu(), test_ds.labels)
    finally:
        bundle.net.train(was_training)
    return result
