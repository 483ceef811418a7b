"""Pipeline orchestration: stages, run directories, grids, and reports.

Run directory layout::

    config.lock            resolved config (YAML)
    checkpoints/           <stage>.ckpt, expert_<k>.ckpt, student.ckpt
    logs/                  per-stage loss CSVs, subset manifests, lineval.json
    cluster/               assignments.csv, centroids.csv, pca.csv, summary.json
    results.csv            one ResultRow

A stage whose outputs already exist is loaded instead of recomputed; every
stage derives its randomness from the run seed alone, so a resumed run ends
with the same row as an uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout

from . import clusterer as cl
from .augment import CIFAR_MEAN, CIFAR_STD, AugmentationPolicy
from .config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    deep_merge,
    dump_config,
    load_config_dict,
)
from .dataset import (
    Corpus,
    ImbalanceSpec,
    LabeledDataset,
    channel_stats,
    export_distribution,
    imbalanced_counts,
    load_corpus,
    make_balanced_rescaled,
    make_imbalanced,
    synthetic_corpus,
)
from .distiller import DistillSetup, distill
from .errors import (
    ImbsslError,
    InvalidConfigError,
    MissingArtifactsError,
    PipelineError,
    RunLockedError,
    StageError,
)
from .lineval import EvalConfig, linear_eval
from .nn_core import BackboneConfig, HeadConfig, ModelBundle, init_bundle, load_checkpoint, save_checkpoint
from .optimizers import OptimizerConfig
from .trainer import TrainLog, TrainSchedule, pretrain, read_log_csv, train_experts

log = logging.getLogger(__name__)

ARTIFACT_ROOT_ENV = "IMBSSL_ARTIFACT_ROOT"

STAGES = {
    "simclr": ("dataset", "pretrain", "lineval"),
    "simsiam": ("dataset", "pretrain", "lineval"),
    "simsiam+c+d": ("dataset", "base", "cluster", "experts", "distill", "lineval"),
    "simsiam+d": ("dataset", "base", "experts", "distill", "lineval"),
}

EXIT_CODES = {
    "config": 2,
    "artifacts": 3,
    "locked": 4,
    "dataset": 10,
    "pretrain": 11,
    "base": 11,
    "cluster": 12,
    "experts": 13,
    "distill": 14,
    "lineval": 15,
}

# seed offsets per stage, so skipping a finished stage leaves the others unchanged
_EXPERT_SEED = 1
_DISTILL_SEED = 2
_FINETUNE_SUBSET_SEED = 1


@dataclass
class ResultRow:
    subset: str
    N: int
    method: str
    accuracy: float
    seed: int
    epochs: int
    run: str = ""
    started: str = ""
    finished: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")


ROW_FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


def write_rows(path, rows: Iterable[ResultRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(dataclasses.asdict(r))
    return path


def read_rows(path) -> list[ResultRow]:
    with Path(path).open() as fh:
        return [
            ResultRow(r["subset"], int(r["N"]), r["method"], float(r["accuracy"]), int(r["seed"]),
                      int(r["epochs"]), r.get("run", ""), r.get("started", ""), r.get("finished", ""))
            for r in csv.DictReader(fh)
        ]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "."))


def resolve_run_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    return p if p.is_absolute() else artifact_root() / p


def plan(cfg: RunConfig) -> tuple[str, ...]:
    return STAGES[cfg.method]


# --- building blocks -------------------------------------------------------


def load_source(cfg: RunConfig) -> Corpus:
    ds = cfg.dataset
    if ds.source == "synthetic":
        s = ds.synthetic
        return synthetic_corpus(s.num_classes, s.train_per_class, s.test_per_class, s.seed,
                                pattern=s.pattern, noise=s.noise)
    return load_corpus(ds.path)


def subset_seed(cfg: RunConfig) -> int:
    return cfg.seed if cfg.dataset.subset_seed is None else cfg.dataset.subset_seed


def build_subsets(cfg: RunConfig, corpus: Corpus) -> tuple[LabeledDataset, LabeledDataset]:
    """(pre-training subset, balanced fine-tuning set of the same size)."""
    sub = cfg.dataset.subset
    train = corpus.train
    seed = subset_seed(cfg)
    C = train.num_classes
    if sub.kind == "imbalanced":
        pre = make_imbalanced(train, ImbalanceSpec(sub.p, C), seed)
    elif sub.kind == "balanced":
        total = sub.total
        if total is None:
            total = sum(imbalanced_counts(train.per_class_counts[0], ImbalanceSpec(sub.match_p, C)))
        pre = make_balanced_rescaled(train, total, seed)
    else:
        pre = train
    if len(pre) == len(train):
        finetune = train
    else:
        finetune = make_balanced_rescaled(train, len(pre), seed + _FINETUNE_SUBSET_SEED)
    return pre, finetune


def build_policy(cfg: RunConfig, corpus: Corpus) -> AugmentationPolicy:
    a = cfg.augment
    mean, std = channel_stats(corpus.train) if a.normalization == "corpus" else (CIFAR_MEAN, CIFAR_STD)
    return AugmentationPolicy(
        crop_scale_range=tuple(a.crop_scale_range),
        crop_ratio_range=tuple(a.crop_ratio_range),
        flip_probability=a.flip_probability,
        color_jitter=tuple(a.color_jitter),
        color_jitter_probability=a.color_jitter_probability,
        grayscale_probability=a.grayscale_probability,
        mean=tuple(mean),
        std=tuple(std),
    )


def model_configs(cfg: RunConfig) -> tuple[BackboneConfig, HeadConfig]:
    m = cfg.model
    return (
        BackboneConfig(m.family, m.output_dim, m.cifar_stem),
        HeadConfig(m.projector_hidden, m.projector_bn, m.predictor_hidden, m.regression_hidden),
    )


def train_schedule(cfg: RunConfig, method: str, epochs: int, seed: int) -> TrainSchedule:
    opt = cfg.pretrain.simclr if method == "simclr" else cfg.pretrain.simsiam
    return TrainSchedule(
        epochs=epochs,
        batch_size=cfg.pretrain.batch_size,
        optimizer=OptimizerConfig(**dataclasses.asdict(opt)),
        method=method,
        seed=seed,
        temperature=cfg.pretrain.temperature,
        per_step_lr=cfg.pretrain.per_step_lr,
    )


def base_epochs(cfg: RunConfig) -> int:
    if cfg.method in ("simclr", "simsiam"):
        return cfg.budget
    if cfg.method == "simsiam+d" and not cfg.distill.use_expert:
        # base-teacher-only reading of "+D": the expert epochs go to the base model
        return cfg.stages.base + cfg.stages.expert
    return cfg.stages.base


def executed_epochs(run_dir: Path, cfg: RunConfig) -> int:
    """Epochs actually run, counted from the per-stage loss logs."""
    logs = Path(run_dir) / "logs"
    if cfg.method in ("simclr", "simsiam"):
        return len(read_log_csv(logs / "pretrain.csv"))
    total = len(read_log_csv(logs / "base.csv")) + len(read_log_csv(logs / "distill.csv"))
    expert_logs = sorted(logs.glob("expert_*.csv"))
    if expert_logs:
        lengths = {len(read_log_csv(p)) for p in expert_logs}
        if len(lengths) != 1:
            raise PipelineError(f"expert logs disagree on epoch count: {sorted(lengths)}")
        total += lengths.pop()
    return total


# --- the pipeline ----------------------------------------------------------


@dataclass
class Pipeline:
    cfg: RunConfig
    run_dir: Path
    corpus: Corpus | None = None
    pretrain_set: LabeledDataset | None = None
    finetune_set: LabeledDataset | None = None
    policy: AugmentationPolicy | None = None
    model: ModelBundle | None = None
    assignments: np.ndarray | None = None
    experts: list[ModelBundle] = field(default_factory=list)
    rows: list[ResultRow] = field(default_factory=list)
    started: str = field(default_factory=_now)

    @property
    def ckpt_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def log_dir(self) -> Path:
        return self.run_dir / "logs"

    @property
    def cluster_dir(self) -> Path:
        return self.run_dir / "cluster"

    def _to_device(self, bundle: ModelBundle) -> ModelBundle:
        bundle.net.to(torch.device(self.cfg.device))
        return bundle

    def _load(self, path: Path) -> ModelBundle:
        return self._to_device(load_checkpoint(path))

    # stages

    def stage_dataset(self):
        cfg = self.cfg
        self.corpus = load_source(cfg)
        self.pretrain_set, self.finetune_set = build_subsets(cfg, self.corpus)
        self.policy = build_policy(cfg, self.corpus)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        export_distribution(self.pretrain_set, self.log_dir / "distribution.csv")
        for name, ds in (("subset.csv", self.pretrain_set), ("finetune_subset.csv", self.finetune_set)):
            with (self.log_dir / name).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["record_index", "label"])
                w.writerows(zip(ds.source_index.tolist(), ds.labels.tolist()))

    def _pretrain_stage(self, name: str):
        path = self.ckpt_dir / f"{name}.ckpt"
        if path.exists():
            self.model = self._load(path)
            return
        cfg = self.cfg
        bundle = self._to_device(init_bundle(*model_configs(cfg), cfg.seed, self.corpus.train.num_classes))
        method = cfg.baseline_method
        schedule = train_schedule(cfg, method, base_epochs(cfg), cfg.seed)
        bundle, _ = pretrain(method, self.pretrain_set, bundle, schedule, self.policy,
                             log_path=self.log_dir / f"{name}.csv", checkpoint_dir=self.ckpt_dir,
                             checkpoint_every=cfg.pretrain.checkpoint_every)
        save_checkpoint(bundle, path)
        self.model = bundle

    def stage_pretrain(self):
        self._pretrain_stage("pretrain")

    def stage_base(self):
        self._pretrain_stage("base")

    def stage_cluster(self):
        cfg, out = self.cfg, self.cluster_dir
        assign_path = out / "assignments.csv"
        if assign_path.exists():
            _, self.assignments = cl.read_assignments(assign_path)
            return
        policy = self.policy
        feats = cl.extract_features(self.model, self.pretrain_set, policy.mean, policy.std,
                                    space=cfg.cluster.feature_space)
        X = cl.l2_normalize(feats) if cfg.cluster.l2_normalize else feats.values
        c = cfg.cluster
        model = cl.kmeans_nonempty(X, c.K, cfg.seed, retries=c.retries, max_iters=c.max_iters,
                                   tol=c.tol, n_init=c.n_init)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "centroids.csv", model.centroids, delimiter=",")
        cl.write_pca(out / "pca.csv", self.pretrain_set.source_index, cl.pca_project(X),
                     model.assignments, self.pretrain_set.labels)
        (out / "summary.json").write_text(json.dumps({
            "K": model.K, "sizes": model.sizes(), "inertia": model.inertia,
            "n_iter": model.n_iter, "seed": model.seed,
        }, indent=2))
        # written last: its presence marks the stage complete
        cl.write_assignments(assign_path, self.pretrain_set.source_index, model.assignments)
        self.assignments = model.assignments

    def stage_experts(self):
        cfg = self.cfg
        if cfg.method == "simsiam+d":
            if not cfg.distill.use_expert:
                self.experts = []
                return
            self.assignments = np.zeros(len(self.pretrain_set), np.int64)
            K = 1
        else:
            K = cfg.cluster.K
        paths = [self.ckpt_dir / f"expert_{k + 1}.ckpt" for k in range(K)]
        if all(p.exists() for p in paths):
            self.experts = [self._load(p) for p in paths]
            return
        parts = cl.partition(self.pretrain_set, self.assignments, K)
        schedule = train_schedule(cfg, "simsiam", cfg.stages.expert, cfg.seed + _EXPERT_SEED)
        experts, _ = train_experts(self.model, parts, schedule, self.policy, log_dir=self.log_dir)
        for expert, p in zip(experts, paths):
            save_checkpoint(expert, p)
        self.experts = experts

    def stage_distill(self):
        path = self.ckpt_dir / "student.ckpt"
        if path.exists():
            self.model = self._load(path)
            return
        cfg = self.cfg
        if self.assignments is None:
            self.assignments = np.zeros(len(self.pretrain_set), np.int64)
        setup = DistillSetup(
            base_teacher=self.model,
            expert_teachers=self.experts,
            assignments=self.assignments,
            schedule=train_schedule(cfg, "simsiam", cfg.stages.distill, cfg.seed + _DISTILL_SEED),
            use_experts=bool(self.experts),
            space=cfg.distill.space,
        )
        student, _ = distill(setup, self.pretrain_set, self.policy, log_path=self.log_dir / "distill.csv")
        save_checkpoint(student, path)
        self.model = student

    def stage_lineval(self):
        cfg = self.cfg
        row_path = self.log_dir / "lineval.json"
        if row_path.exists():
            row = ResultRow(**json.loads(row_path.read_text()))
        else:
            executed = executed_epochs(self.run_dir, cfg)
            if executed != cfg.budget:
                raise PipelineError(f"executed {executed} epochs, budget is {cfg.budget}")
            lc = cfg.lineval
            ecfg = EvalConfig(lc.epochs, lc.batch_size, lc.lr, lc.momentum, lc.weight_decay,
                              lc.augment_train, cfg.seed)
            result = linear_eval(self.model, self.finetune_set, self.corpus.test, ecfg, self.policy)
            TrainLog(result.losses, result.lrs).write_csv(self.log_dir / "lineval.csv")
            sub = cfg.dataset.subset
            row = ResultRow(
                subset=sub.label(len(self.pretrain_set)),
                N=len(self.pretrain_set),
                method=cfg.method,
                accuracy=result.accuracy,
                seed=cfg.seed,
                epochs=executed,
                run=cfg.name,
                started=self.started,
                finished=_now(),
            )
            row_path.write_text(json.dumps(dataclasses.asdict(row), indent=2))
        write_rows(self.run_dir / "results.csv", [row])
        self.rows = [row]


def _check_lock_file(run_dir: Path, cfg: RunConfig) -> None:
    lock = run_dir / "config.lock"
    text = dump_config(cfg)
    if lock.exists():
        if yaml.safe_load(lock.read_text()) != yaml.safe_load(text):
            raise InvalidConfigError(f"{run_dir} already holds a run with a different config")
    else:
        lock.write_text(text)


def run(cfg: RunConfig, until: str | None = None) -> list[ResultRow]:
    """Execute (or resume) the stages of ``cfg``'s method, up to ``until``."""
    cfg.validate()
    stages = plan(cfg)
    if until is not None and until not in stages:
        raise InvalidConfigError(f"method {cfg.method} has no stage {until!r}; stages: {stages}")
    if cfg.requires_accelerator and cfg.device == "cuda" and not torch.cuda.is_available():
        raise InvalidConfigError("this config requires an accelerator (device=cuda), none available")
    run_dir = resolve_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(run_dir / ".lock"), timeout=0):
            _check_lock_file(run_dir, cfg)
            pipe = Pipeline(cfg, run_dir)
            for stage in stages:
                log.info("[%s] stage %s", cfg.name, stage)
                try:
                    getattr(pipe, f"stage_{stage}")()
                except ImbsslError as exc:
                    if isinstance(exc, StageError):
                        raise
                    raise StageError(stage, exc) from exc
                except Exception as exc:  # any failure is tagged with its stage
                    raise StageError(stage, exc) from exc
                if stage == until:
                    break
            return pipe.rows
    except Timeout as exc:
        raise RunLockedError(f"{run_dir} is locked by another run") from exc


# --- grids -----------------------------------------------------------------


def subset_key(cfg: RunConfig) -> str:
    s = cfg.dataset.subset
    if s.kind == "imbalanced":
        return f"imbalanced-p{s.p:g}"
    if s.kind == "balanced":
        return f"balanced-{s.total}" if s.total is not None else f"balanced-match-p{s.match_p:g}"
    return "full"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", text).strip("-")


def expand_grid(grid: dict, base_dir: Path = Path(".")) -> list[RunConfig]:
    """Cartesian product subsets x methods x seeds over a base config."""
    base = grid.get("base", {})
    if isinstance(base, str):
        base = load_config_dict(base_dir / base)
    base = deep_merge(base, grid.get("overrides", {}))
    out_root = Path(grid.get("output_dir", base.get("output_dir", "runs/grid")))
    configs = []
    for subset in grid.get("subsets", [base.get("dataset", {}).get("subset", {})]):
        for method in grid.get("methods", [base.get("method", "simsiam")]):
            for seed in grid.get("seeds", [base.get("seed", 0)]):
                data = deep_merge(base, {"method": method, "seed": seed, "dataset": {"subset": subset}})
                cfg = config_from_dict(data)
                cfg.name = f"{subset_key(cfg)}__{_slug(method)}__s{seed}"
                cfg.output_dir = str(out_root / cfg.name)
                configs.append(cfg)
    return configs


@dataclass
class GridResult:
    rows: list[ResultRow]
    failures: dict[str, str]


def run_grid(configs: list[RunConfig], grid_dir=None) -> GridResult:
    keys = [(subset_key(c), c.method, c.seed) for c in configs]
    seen = set()
    for k in keys:
        if k in seen:
            raise InvalidConfigError(f"duplicate grid entry (subset, method, seed) = {k}")
        seen.add(k)
    rows, failures = [], {}
    for cfg in configs:
        try:
            rows += run(cfg)
        except ImbsslError as exc:
            log.error("run %s failed: %s", cfg.name, exc)
            failures[cfg.name] = str(exc)
    if grid_dir is not None:
        grid_dir = Path(grid_dir)
        write_rows(grid_dir / "results.csv", rows)
        (grid_dir / "table.md").write_text(render_table(rows))
        if failures:
            (grid_dir / "failures.json").write_text(json.dumps(failures, indent=2))
    return GridResult(rows, failures)


def render_table(rows: list[ResultRow]) -> str:
    """Markdown accuracy table: one line per subset, one column per method;
    cells are seed means (with std when several seeds exist)."""
    subsets, methods = [], []
    cells: dict[tuple[str, str], list[float]] = {}
    sizes: dict[str, int] = {}
    for r in rows:
        if r.subset not in subsets:
            subsets.append(r.subset)
        if r.method not in methods:
            methods.append(r.method)
        cells.setdefault((r.subset, r.method), []).append(r.accuracy)
        sizes[r.subset] = r.N
    lines = ["| Subset | N | " + " | ".join(methods) + " |",
             "|---|---:|" + "---:|" * len(methods)]
    for s in subsets:
        vals = []
        for m in methods:
            acc = cells.get((s, m))
            if not acc:
                vals.append("n/a")
            elif len(acc) == 1:
                vals.append(f"{acc[0]:.2f}")
            else:
                vals.append(f"{np.mean(acc):.2f} ± {np.std(acc):.2f}")
        lines.append(f"| {s} | {sizes[s]} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def report(run_dir) -> str:
    """Collect every results.csv under ``run_dir`` into report/ (table + plot data)."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingArtifactsError(f"{run_dir} does not exist")
    result_files = sorted(p for p in run_dir.rglob("results.csv") if p.parent.name != "report")
    runs = [p.parent for p in result_files if (p.parent / "config.lock").exists()]
    if not runs:
        raise MissingArtifactsError(f"no finished runs under {run_dir}")
    rows = [r for p in runs for r in read_rows(p / "results.csv")]
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    table = render_table(rows)
    (out / "table.md").write_text(table)
    write_rows(out / "results.csv", rows)
    for rd in runs:
        rel = rd.relative_to(run_dir)
        tag = _slug(str(rel)) if rel.parts else _slug(rd.name)
        if (rd / "logs" / "distribution.csv").exists():
            shutil.copy(rd / "logs" / "distribution.csv", out / f"fig1_distribution__{tag}.csv")
        if (rd / "cluster" / "pca.csv").exists():
            shutil.copy(rd / "cluster" / "pca.csv", out / f"fig3_pca__{tag}.csv")
    return table
