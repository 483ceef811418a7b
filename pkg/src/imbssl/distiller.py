"""Multi-teacher distillation of a base model and per-cluster experts into one student."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPolicy, batch_views
from .dataset import LabeledDataset
from .errors import PipelineError
from .nn_core import ModelBundle, encode, project, regress, with_regression_heads
from .objectives import distill_terms
from .optimizers import build_optimizer, set_lr
from .trainer import TrainLog, TrainSchedule, epoch_batches, epoch_rng, lr_for, train_experts

STUDENT_HEAD_SEED_OFFSET = 104729


@dataclass
class DistillSetup:
    base_teacher: ModelBundle
    expert_teachers: list[ModelBundle]
    assignments: np.ndarray
    schedule: TrainSchedule
    student: ModelBundle | None = None
    use_experts: bool = True
    space: str = "projector"   # or "backbone"

    @property
    def K(self) -> int:
        return len(self.expert_teachers)


def make_student(base: ModelBundle, K: int, seed: int) -> ModelBundle:
    """Copy of the base model carrying K+1 fresh regression heads (base, 1..K)."""
    student = with_regression_heads(base, K + 1, seed + STUDENT_HEAD_SEED_OFFSET)
    student.epoch = student.step = 0
    return student


def model_output(bundle: ModelBundle, x: torch.Tensor, space: str = "projector") -> torch.Tensor:
    f = encode(bundle, x)
    return f if space == "backbone" else project(bundle, f)


def _arch(bundle: ModelBundle) -> dict:
    heads = asdict(bundle.head_cfg)
    heads.pop("num_regression_heads")
    return {"backbone": asdict(bundle.backbone_cfg), "heads": heads}


def view_hash(x: torch.Tensor) -> str:
    return hashlib.sha1(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def _validate(setup: DistillSetup, dataset: LabeledDataset, student: ModelBundle) -> np.ndarray:
    a = np.asarray(setup.assignments, dtype=np.int64)
    if len(a) != len(dataset):
        raise PipelineError(f"{len(a)} assignments for {len(dataset)} records")
    if setup.use_experts:
        if setup.K == 0:
            raise PipelineError("no expert teachers supplied")
        if len(a) and (a.min() < 0 or a.max() >= setup.K):
            raise PipelineError(f"assignment index outside [0, {setup.K})")
    for t in [setup.base_teacher, *setup.expert_teachers]:
        if _arch(t) != _arch(student):
            raise PipelineError("teacher and student architectures differ")
    if len(dataset) < 2:
        raise PipelineError("distillation needs at least two records")
    return a


def distill(setup: DistillSetup, dataset: LabeledDataset, policy: AugmentationPolicy | None = None,
            log_path=None, probe: list | None = None) -> tuple[ModelBundle, TrainLog]:
    """Train the student to regress the base teacher and its records' experts.

    Every network sees the same single augmented view of each record. When
    ``probe`` is a list, one dict per batch is appended with the record
    positions, the expert head used per record, and per-record hashes of the
    inputs each network actually received.
    """
    schedule = setup.schedule
    policy = policy or AugmentationPolicy()
    K = setup.K if setup.use_experts else 0
    student = setup.student or make_student(setup.base_teacher, K, schedule.seed)
    a = _validate(setup, dataset, student)
    teachers = [setup.base_teacher, *setup.expert_teachers]
    modes = [t.net.training for t in teachers]
    for t in teachers:
        t.eval()

    n = len(dataset)
    base_lr = schedule.optimizer.effective_lr(min(schedule.batch_size, n))
    net = student.net
    params = list(net.backbone.parameters()) + list(net.projector.parameters()) + list(net.heads.parameters())
    opt = build_optimizer(params, schedule.optimizer, base_lr)
    trace = TrainLog(extra={"base_term": [], "expert_term": []})
    student.train()
    try:
        for epoch in range(schedule.epochs):
            rng = epoch_rng(schedule.seed, epoch)
            batches = epoch_batches(n, schedule.batch_size, rng)
            sums = np.zeros(3)
            lr = base_lr
            for step, idx in enumerate(batches):
                lr = lr_for(schedule, base_lr, epoch, step, len(batches))
                set_lr(opt, lr)
                (v,) = batch_views(dataset.images[idx], policy, rng, 1)
                v = v.to(student.device)
                q_s = model_output(student, v, setup.space)
                r_base = regress(student, "base", q_s)
                with torch.no_grad():
                    q_base = model_output(setup.base_teacher, v, setup.space)
                    q_exp = torch.zeros_like(q_base)
                    k_batch = a[idx]
                    expert_inputs = {}
                    if K:
                        for k in np.unique(k_batch):
                            rows = np.flatnonzero(k_batch == k)
                            x_k = v[rows]
                            q_exp[rows] = model_output(setup.expert_teachers[k], x_k, setup.space)
                            expert_inputs.update({int(r): x_k[j] for j, r in enumerate(rows)})
                if K:
                    r_all = torch.stack([regress(student, k + 1, q_s) for k in range(K)])
                    r_exp = r_all[torch.as_tensor(k_batch, device=r_all.device),
                                  torch.arange(len(idx), device=r_all.device)]
                    base_term, expert_term = distill_terms(r_base, r_exp, q_base, q_exp)
                else:
                    base_term, _ = distill_terms(r_base, r_base, q_base, q_base)
                    expert_term = torch.zeros((), dtype=base_term.dtype)
                loss = base_term + expert_term
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                student.step += 1
                sums += len(idx) * np.array([loss.item(), base_term.item(), expert_term.item()])
                if probe is not None:
                    probe.append({
                        "positions": idx.copy(),
                        "heads": (k_batch + 1) if K else np.zeros(len(idx), np.int64),
                        "student": [view_hash(x) for x in v],
                        "base": [view_hash(x) for x in v],
                        "expert": [view_hash(expert_inputs[j]) if K else None for j in range(len(idx))],
                    })
            loss_e, base_e, exp_e = sums / n
            if not np.isfinite(loss_e):
                raise PipelineError(f"non-finite distillation loss at epoch {epoch}")
            student.epoch += 1
            trace.losses.append(float(loss_e))
            trace.lrs.append(lr)
            trace.extra["base_term"].append(float(base_e))
            trace.extra["expert_term"].append(float(exp_e))
    finally:
        for t, mode in zip(teachers, modes):
            t.net.train(mode)
    if log_path:
        trace.write_csv(log_path, columns=("base_term", "expert_term"))
    return student, trace


def distill_no_cluster(base_teacher: ModelBundle, dataset: LabeledDataset, expert_schedule: TrainSchedule,
                       distill_schedule: TrainSchedule, policy: AugmentationPolicy | None = None,
                       use_expert: bool = True, log_dir=None):
    """Distillation without the divide step: one expert trained on the whole set.

    With ``use_expert=False`` the expert is skipped and only the base teacher
    is regressed. Returns (student, experts, expert logs, distill log).
    """
    experts, expert_logs = [], []
    if use_expert:
        experts, expert_logs = train_experts(base_teacher, [dataset], expert_schedule, policy, log_dir)
    setup = DistillSetup(base_teacher, experts, np.zeros(len(dataset), np.int64), distill_schedule,
                         use_experts=use_expert)
    log_path = Path(log_dir) / "distill.csv" if log_dir else None
    student, trace = distill(setup, dataset, policy, log_path)
    return student, experts, expert_logs, trace
