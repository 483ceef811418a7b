"""Declarative run configuration: nested dataclasses <-> YAML.

Unknown keys are rejected, so a typo in a config file fails loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import InvalidConfigError

SCHEMA_VERSION = 1
METHODS = ("simclr", "simsiam", "simsiam+c+d", "simsiam+d")


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    seed: int = 0
    pattern: str = "grating"
    noise: float = 40.0


@dataclass
class SubsetSpec:
    kind: str = "imbalanced"          # imbalanced | balanced | full
    p: float = 10.0                   # imbalance factor (kind=imbalanced)
    total: int | None = None          # kind=balanced: explicit size ...
    match_p: float | None = None      # ... or the size of the p=match_p imbalanced set

    def label(self, n: int) -> str:
        if self.kind == "imbalanced":
            return f"Imbalanced (p={self.p:g})"
        if self.kind == "balanced":
            return f"Balanced (rs.{n})"
        return "Balanced (full)"


@dataclass
class DatasetSection:
    source: str = "synthetic"         # synthetic | path
    path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    subset: SubsetSpec = field(default_factory=SubsetSpec)
    subset_seed: int | None = None    # default: run seed


@dataclass
class ModelSection:
    family: str = "resnet-cifar-18"
    output_dim: int = 512
    cifar_stem: bool = True
    projector_hidden: int | None = None
    projector_bn: bool = True
    predictor_hidden: int | None = None
    regression_hidden: int | None = None


@dataclass
class OptimizerSection:
    kind: str = "sgd"
    base_lr: float = 0.03
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coefficient: float = 0.001
    lr_scaling: str = "linear-by-batch"


def _simclr_opt() -> OptimizerSection:
    return OptimizerSection(kind="lars", base_lr=0.3, weight_decay=1e-6)


@dataclass
class PretrainSection:
    batch_size: int = 1024
    temperature: float = 0.5
    per_step_lr: bool = False
    simclr: OptimizerSection = field(default_factory=_simclr_opt)
    simsiam: OptimizerSection = field(default_factory=OptimizerSection)
    checkpoint_every: int = 0


@dataclass
class StageEpochs:
    base: int = 40
    expert: int = 180
    distill: int = 80

    @property
    def total(self) -> int:
        return self.base + self.expert + self.distill


@dataclass
class AugmentSection:
    crop_scale_range: list[float] = field(default_factory=lambda: [0.2, 1.0])
    crop_ratio_range: list[float] = field(default_factory=lambda: [3 / 4, 4 / 3])
    flip_probability: float = 0.5
    color_jitter: list[float] = field(default_factory=lambda: [0.4, 0.4, 0.4, 0.1])
    color_jitter_probability: float = 0.8
    grayscale_probability: float = 0.2
    normalization: str = "corpus"     # corpus | cifar


@dataclass
class ClusterSection:
    K: int = 5
    max_iters: int = 300
    tol: float = 1e-4
    n_init: int = 10
    retries: int = 5
    l2_normalize: bool = False
    feature_space: str = "backbone"   # backbone | projector


@dataclass
class DistillSection:
    space: str = "projector"          # projector | backbone
    use_expert: bool = True           # False: "+D" regresses the base teacher only


@dataclass
class LinevalSection:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment_train: bool = True


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "run"
    method: str = "simsiam"
    seed: int = 0
    budget: int = 300
    stages: StageEpochs = field(default_factory=StageEpochs)
    output_dir: str = "runs/run"
    device: str = "cpu"
    requires_accelerator: bool = False
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    distill: DistillSection = field(default_factory=DistillSection)
    lineval: LinevalSection = field(default_factory=LinevalSection)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidConfigError(f"schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.budget <= 0:
            raise InvalidConfigError("budget must be positive")
        if self.method in ("simsiam+c+d", "simsiam+d"):
            s = self.stages
            if min(s.base, s.expert, s.distill) <= 0:
                raise InvalidConfigError("every stage needs at least one epoch")
            if s.total != self.budget:
                raise InvalidConfigError(
                    f"stage epochs {s.base}+{s.expert}+{s.distill}={s.total} differ from budget {self.budget}"
                )
        if self.method == "simsiam+c+d" and self.cluster.K < 1:
            raise InvalidConfigError("K must be at least 1")
        sub = self.dataset.subset
        if sub.kind not in ("imbalanced", "balanced", "full"):
            raise InvalidConfigError(f"unknown subset kind {sub.kind!r}")
        if sub.kind == "balanced" and (sub.total is None) == (sub.match_p is None):
            raise InvalidConfigError("balanced subset needs exactly one of total / match_p")
        if self.dataset.source not in ("synthetic", "path"):
            raise InvalidConfigError(f"unknown dataset source {self.dataset.source!r}")
        if self.dataset.source == "path" and not self.dataset.path:
            raise InvalidConfigError("dataset.path is required when source=path")
        if self.augment.normalization not in ("corpus", "cifar"):
            raise InvalidConfigError("augment.normalization must be 'corpus' or 'cifar'")
        if self.cluster.feature_space not in ("backbone", "projector"):
            raise InvalidConfigError("cluster.feature_space must be 'backbone' or 'projector'")
        if self.distill.space not in ("backbone", "projector"):
            raise InvalidConfigError("distill.space must be 'backbone' or 'projector'")
        return self

    @property
    def baseline_method(self) -> str:
        return "simclr" if self.method == "simclr" else "simsiam"


# --- (de)serialization ----------------------------------------------------


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = hints[key]
        kwargs[key] = _build(sub, value, f"{where}.{key}" if where else key) if dataclasses.is_dataclass(sub) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def set_path(data: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` in a nested dict (creating levels as needed)."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return data


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise InvalidConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config_dict(path) -> dict:
    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be a mapping")
    parent = data.pop("extends", None)
    if parent:
        data = deep_merge(load_config_dict(path.parent / parent), data)
    return data


def load_config(path, overrides: dict | None = None) -> RunConfig:
    data = load_config_dict(path)
    for key, value in (overrides or {}).items():
        set_path(data, key, value)
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
