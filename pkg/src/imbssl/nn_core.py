"""Backbones, MLP heads, the model bundle, and its checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"IMBSSLCK"                      magic, 8 bytes
    u32 version                      currently 1
    u32 n, n bytes                   config JSON (sorted keys, utf-8)
    u32 n, n bytes                   metadata JSON (seed, epoch, step)
    u32 tensor count
    per tensor:
        u16 n, n bytes               name (state-dict key, utf-8)
        u8 dtype                     0 = float32, 1 = int64
        u8 ndim, ndim x u32          shape
        raw data                     little-endian, C order
    u32 crc32                        of every preceding byte
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, InvalidConfigError

RESNET_FAMILIES = ("resnet-cifar-18", "resnet19")
FAMILIES = RESNET_FAMILIES + ("tiny-conv",)
MAGIC = b"IMBSSLCK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "resnet-cifar-18"
    output_dim: int = 512
    # 3x3 stride-1 stem without max-pool (small-image variant)
    cifar_stem: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown backbone family {self.family!r}; choose from {FAMILIES}")
        if self.output_dim <= 0:
            raise InvalidConfigError("output_dim must be positive")
        if self.family in RESNET_FAMILIES and self.output_dim % 8:
            raise InvalidConfigError("resnet output_dim must be divisible by 8")


@dataclass(frozen=True)
class HeadConfig:
    projector_hidden: int | None = None     # default d
    projector_bn: bool = True
    predictor_hidden: int | None = None     # default d // 4
    regression_hidden: int | None = None    # default d
    num_regression_heads: int = 0

    def __post_init__(self):
        if self.num_regression_heads < 0:
            raise InvalidConfigError("num_regression_heads must be >= 0")
        for name in ("projector_hidden", "predictor_hidden", "regression_hidden"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise InvalidConfigError(f"{name} must be positive")


# --- modules ---------------------------------------------------------------


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNetCifar(nn.Module):
    """Four stages of two basic blocks; widths d/8, d/4, d/2, d."""

    def __init__(self, output_dim: int = 512, cifar_stem: bool = True):
        super().__init__()
        w = output_dim // 8
        if cifar_stem:
            self.stem = nn.Sequential(nn.Conv2d(3, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, 7, 2, 3, bias=False), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(3, 2, 1)
            )
        layers, in_planes = [], w
        for i, planes in enumerate((w, 2 * w, 4 * w, 8 * w)):
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.layers(self.stem(x))).flatten(1)


class TinyConv(nn.Module):
    def __init__(self, output_dim: int = 64):
        super().__init__()

        def block(cin, cout, stride):
            return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]

        self.features = nn.Sequential(*block(3, 16, 1), *block(16, 32, 2), *block(32, output_dim, 2))
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


def mlp(dim_in: int, hidden: int, dim_out: int, bn: bool = True) -> nn.Sequential:
    layers = [nn.Linear(dim_in, hidden, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm1d(hidden))
    layers += [nn.ReLU(), nn.Linear(hidden, dim_out)]
    return nn.Sequential(*layers)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.family == "tiny-conv":
        return TinyConv(cfg.output_dim)
    return ResNetCifar(cfg.output_dim, cfg.cifar_stem)


class SSLNet(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, num_classes: int = 10):
        super().__init__()
        d = backbone_cfg.output_dim
        self.backbone = build_backbone(backbone_cfg)
        self.projector = mlp(d, head_cfg.projector_hidden or d, d, head_cfg.projector_bn)
        self.predictor = mlp(d, head_cfg.predictor_hidden or max(1, d // 4), d)
        self.heads = nn.ModuleList(
            mlp(d, head_cfg.regression_hidden or d, d) for _ in range(head_cfg.num_regression_heads)
        )
        self.classifier = nn.Linear(d, num_classes)


# --- bundle ----------------------------------------------------------------


@dataclass
class ModelBundle:
    net: SSLNet
    backbone_cfg: BackboneConfig
    head_cfg: HeadConfig
    num_classes: int = 10
    seed: int = 0
    epoch: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.backbone_cfg.output_dim

    @property
    def device(self) -> torch.device:
        return next(self.net.parameters()).device

    @property
    def num_heads(self) -> int:
        return len(self.net.heads)

    def config_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone_cfg),
            "heads": asdict(self.head_cfg),
            "num_classes": self.num_classes,
        }

    def train(self) -> "ModelBundle":
        self.net.train()
        return self

    def eval(self) -> "ModelBundle":
        self.net.eval()
        return self

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)


def _build_net(backbone_cfg, head_cfg, num_classes, seed) -> SSLNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SSLNet(backbone_cfg, head_cfg, num_classes)


def init_bundle(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: int,
                num_classes: int = 10) -> ModelBundle:
    net = _build_net(backbone_cfg, head_cfg, num_classes, seed)
    return ModelBundle(net, backbone_cfg, head_cfg, num_classes, seed=seed)


def with_regression_heads(bundle: ModelBundle, n_heads: int, seed: int) -> ModelBundle:
    """Copy of ``bundle`` whose regression heads are replaced by ``n_heads`` fresh ones."""
    out = bundle.clone()
    head_cfg = HeadConfig(**{**asdict(bundle.head_cfg), "num_regression_heads": n_heads})
    d = bundle.dim
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        heads = nn.ModuleList(mlp(d, head_cfg.regression_hidden or d, d) for _ in range(n_heads))
        out.net.heads = heads.to(bundle.device)
    out.head_cfg = head_cfg
    return out


def reset_classifier(bundle: ModelBundle, seed: int) -> None:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle.net.classifier = nn.Linear(bundle.dim, bundle.num_classes).to(bundle.device)


def _check_dim(x: torch.Tensor, d: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"{what} expects B x {d} input, got {tuple(x.shape)}")


def encode(bundle: ModelBundle, batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"encode expects B x 3 x H x W input, got {tuple(batch.shape)}")
    return bundle.net.backbone(batch.to(bundle.device))


def project(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    _check_dim(features, bundle.dim, "project")
    return bundle.net.projector(features)


def predict(bundle: ModelBundle, projections: torch.Tensor) -> torch.Tensor:
    _check_dim(projections, bundle.dim, "predict")
    return bundle.net.predictor(projections)


def head_position(bundle: ModelBundle, head) -> int:
    """Map a head id ("base" or expert number 1..K) to its index in ``net.heads``."""
    k = bundle.num_heads - 1
    if head == "base":
        pos = 0
    elif isinstance(head, (int, np.integer)) and not isinstance(head, bool) and 1 <= head <= k:
        pos = int(head)
    else:
        raise IndexError(f"unknown regression head {head!r}; valid: 'base', 1..{k}")
    if pos >= bundle.num_heads:
        raise IndexError("bundle has no regression heads")
    return pos


def regress(bundle: ModelBundle, head, projections: torch.Tensor) -> torch.Tensor:
    _check_dim(projections, bundle.dim, "regress")
    return bundle.net.heads[head_position(bundle, head)](projections)


def classify(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    _check_dim(features, bundle.dim, "classify")
    return bundle.net.classifier(features)


# --- hashing & checkpoints -------------------------------------------------


def state_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, dtypes, shapes, bytes)."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        a = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


_DTYPES = {torch.float32: (0, "<f4"), torch.int64: (1, "<i8")}
_CODES = {0: (torch.float32, "<f4"), 1: (torch.int64, "<i8")}


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for blob in (
        bundle.config_dict(),
        {"seed": bundle.seed, "epoch": bundle.epoch, "step": bundle.step, "extra": bundle.extra},
    ):
        raw = json.dumps(blob, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    state = bundle.net.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dtype = _DTYPES[t.dtype]
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.detach().cpu().contiguous().numpy().astype(np_dtype, copy=False).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(bundle))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelBundle:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    r = _Reader(data[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    blobs = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        blobs.append(json.loads(r.take(n)))
    cfg, meta = blobs
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        dtype, np_dtype = _CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=np_dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    backbone_cfg = BackboneConfig(**cfg["backbone"])
    head_cfg = HeadConfig(**cfg["heads"])
    bundle = init_bundle(backbone_cfg, head_cfg, meta["seed"], cfg["num_classes"])
    try:
        bundle.net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config: {exc}") from exc
    bundle.epoch, bundle.step, bundle.extra = meta["epoch"], meta["step"], meta.get("extra", {})
    return bundle
