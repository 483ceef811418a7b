"""SGD with momentum, LARS, and the cosine learning-rate schedule.

The functional ``sgd_step``/``lars_step`` do the arithmetic; ``SGD`` and
``LARS`` wrap them as ``torch.optim.Optimizer`` subclasses for the trainers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .errors import InvalidConfigError

REFERENCE_BATCH = 256


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    base_lr: float = 0.03
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coefficient: float = 0.001
    lr_scaling: str = "linear-by-batch"

    def __post_init__(self):
        if self.kind not in ("sgd", "lars"):
            raise InvalidConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.base_lr <= 0:
            raise InvalidConfigError("base_lr must be positive")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if self.trust_coefficient <= 0:
            raise InvalidConfigError("trust_coefficient must be positive")
        if self.lr_scaling not in ("linear-by-batch", "none"):
            raise InvalidConfigError(f"unknown lr_scaling {self.lr_scaling!r}")

    def effective_lr(self, batch_size: int) -> float:
        if self.lr_scaling == "linear-by-batch":
            return self.base_lr * batch_size / REFERENCE_BATCH
        return self.base_lr


SIMCLR_OPTIMIZER = OptimizerConfig(kind="lars", base_lr=0.3, weight_decay=1e-6)
SIMSIAM_OPTIMIZER = OptimizerConfig(kind="sgd", base_lr=0.03, weight_decay=1e-5)


@dataclass
class ScheduleState:
    current_step: int
    total_steps: int
    base_lr: float


def cosine_lr(state: ScheduleState) -> float:
    if state.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= state.current_step <= state.total_steps:
        raise ValueError("current_step must lie in [0, total_steps]")
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * state.current_step / state.total_steps))


def _check_shapes(params, grads, buffers):
    if not (len(params) == len(grads) == len(buffers)):
        raise ValueError("params, grads and buffers differ in length")
    for p, g, b in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != b.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, buffer {tuple(b.shape)}")


@torch.no_grad()
def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
             momentum: float, weight_decay: float, buffers: Sequence[torch.Tensor]) -> None:
    """In place: buf <- m*buf + (g + wd*w); w <- w - lr*buf."""
    _check_shapes(params, grads, buffers)
    for p, g, buf in zip(params, grads, buffers):
        d = g + weight_decay * p if weight_decay else g
        buf.mul_(momentum).add_(d)
        p.sub_(lr * buf)


def trust_ratio(param: torch.Tensor, grad: torch.Tensor, weight_decay: float,
                trust_coefficient: float) -> float:
    """eta * ||w|| / (||g|| + wd*||w||), or 0 when ||w|| or the denominator is 0."""
    w_norm = float(torch.linalg.vector_norm(param))
    g_norm = float(torch.linalg.vector_norm(grad))
    denom = g_norm + weight_decay * w_norm
    if w_norm == 0 or denom == 0:
        return 0.0
    return trust_coefficient * w_norm / denom


@torch.no_grad()
def lars_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
              momentum: float, weight_decay: float, trust_coefficient: float,
              exclusions: Iterable[bool], buffers: Sequence[torch.Tensor]) -> list[float]:
    """One LARS update, in place; returns the per-layer local learning rates.

    Non-excluded layers: buf <- m*buf + local*(g + wd*w); w <- w - lr*buf.
    Excluded layers (biases, normalization) take the plain momentum step with
    no weight decay and local rate 1.
    """
    _check_shapes(params, grads, buffers)
    exclusions = list(exclusions)
    if len(exclusions) != len(params):
        raise ValueError("exclusions must have one flag per layer")
    local_rates = []
    for p, g, buf, excluded in zip(params, grads, buffers, exclusions):
        if excluded:
            local, d = 1.0, g
        else:
            local = trust_ratio(p, g, weight_decay, trust_coefficient)
            d = g + weight_decay * p if weight_decay else g
            if local != 1.0:
                d = local * d
        buf.mul_(momentum).add_(d)
        p.sub_(lr * buf)
        local_rates.append(local)
    return local_rates


def default_exclusion(param: torch.Tensor) -> bool:
    """Biases and normalization weights are the parameters with ndim <= 1."""
    return param.ndim <= 1


class _Functional(torch.optim.Optimizer):
    def _collect(self, group):
        params, grads, bufs = [], [], []
        for p in group["params"]:
            if p.grad is None:
                continue
            state = self.state[p]
            if "momentum_buffer" not in state:
                state["momentum_buffer"] = torch.zeros_like(p)
            params.append(p)
            grads.append(p.grad)
            bufs.append(state["momentum_buffer"])
        return params, grads, bufs


class SGD(_Functional):
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            params, grads, bufs = self._collect(group)
            sgd_step(params, grads, group["lr"], group["momentum"], group["weight_decay"], bufs)


class LARS(_Functional):
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 trust_coefficient: float = 0.001):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coefficient=trust_coefficient))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            params, grads, bufs = self._collect(group)
            lars_step(params, grads, group["lr"], group["momentum"], group["weight_decay"],
                      group["trust_coefficient"], [default_exclusion(p) for p in params], bufs)


def build_optimizer(params, cfg: OptimizerConfig, lr: float) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.kind == "lars":
        return LARS(params, lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient)
    return SGD(params, lr, cfg.momentum, cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
