"""Stochastic view generation for pre-training, distillation and evaluation.

Randomness comes only from the ``numpy.random.Generator`` handed in, so a
pipeline is reproducible from (record, policy, seed). Transform parameters are
drawn image by image in a fixed order; the pixel work is then done batched on
float tensors in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

_GRAY = (0.2989, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    flip_probability: float = 0.5
    color_jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    color_jitter_probability: float = 0.8
    grayscale_probability: float = 0.2
    mean: tuple[float, float, float] = CIFAR_MEAN
    std: tuple[float, float, float] = CIFAR_STD

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("flip_probability", "color_jitter_probability", "grayscale_probability"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")
        b, c, s, h = self.color_jitter
        if min(b, c, s) < 0 or not 0 <= h <= 0.5:
            raise ValueError(f"invalid color_jitter {self.color_jitter}")

    @classmethod
    def identity(cls, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> "AugmentationPolicy":
        return cls(crop_scale_range=(1.0, 1.0), flip_probability=0.0, color_jitter=(0, 0, 0, 0),
                   color_jitter_probability=0.0, grayscale_probability=0.0, mean=mean, std=std)

    def crop_flip_only(self) -> "AugmentationPolicy":
        """Lighter variant used for linear-classifier training."""
        return replace(self, color_jitter_probability=0.0, grayscale_probability=0.0)

    def with_normalization(self, mean, std) -> "AugmentationPolicy":
        return replace(self, mean=tuple(mean), std=tuple(std))


class ViewPair(NamedTuple):
    v: torch.Tensor
    v_prime: torch.Tensor


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _pixels(x) -> np.ndarray:
    return np.asarray(getattr(x, "pixels", x), dtype=np.uint8)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(B x) H x W x 3 uint8 -> (B x) 3 x H x W float32 in [0, 1]."""
    images = np.asarray(images, dtype=np.uint8)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(images, -1, -3))).float().div_(255.0)


def normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(-1, 1, 1)
    return (x - m) / s


# --- parameter sampling ----------------------------------------------------


@dataclass
class ChainParams:
    """Per-image transform parameters for a batch of B images."""

    boxes: np.ndarray      # B x 4 (top, left, h, w)
    flip: np.ndarray       # B bool
    jitter: np.ndarray     # B bool
    factors: np.ndarray    # B x 4 (brightness, contrast, saturation, hue)
    order: np.ndarray      # B x 4 permutation of jitter ops
    gray: np.ndarray       # B bool


def _crop_box(rng: np.random.Generator, height: int, width: int, scale, ratio):
    """Random-resized-crop geometry; falls back to the whole image."""
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator, n: int,
                  height: int, width: int) -> ChainParams:
    boxes = np.zeros((n, 4), dtype=np.int64)
    flip = np.zeros(n, dtype=bool)
    jitter = np.zeros(n, dtype=bool)
    factors = np.tile(np.array([1.0, 1.0, 1.0, 0.0]), (n, 1))
    order = np.tile(np.arange(4), (n, 1))
    gray = np.zeros(n, dtype=bool)
    b, c, s, h = policy.color_jitter
    for i in range(n):
        boxes[i] = _crop_box(rng, height, width, policy.crop_scale_range, policy.crop_ratio_range)
        flip[i] = rng.random() < policy.flip_probability
        if rng.random() < policy.color_jitter_probability:
            jitter[i] = True
            for j, strength in enumerate((b, c, s)):
                if strength > 0:
                    factors[i, j] = rng.uniform(max(0.0, 1 - strength), 1 + strength)
            if h > 0:
                factors[i, 3] = rng.uniform(-h, h)
            order[i] = rng.permutation(4)
        gray[i] = rng.random() < policy.grayscale_probability
    return ChainParams(boxes, flip, jitter, factors, order, gray)


# --- batched pixel ops -----------------------------------------------------


def grayscale(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_GRAY, dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def _blend(x: torch.Tensor, other: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    f = f.view(-1, 1, 1, 1)
    return (f * x + (1 - f) * other).clamp(0, 1)


def _rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(1)
    maxc, _ = x.max(1)
    minc, _ = x.min(1)
    eqc = maxc == minc
    cr = maxc - minc
    ones = torch.ones_like(maxc)
    s = cr / torch.where(eqc, ones, maxc)
    cr_div = torch.where(eqc, ones, cr)
    rc = (maxc - r) / cr_div
    gc = (maxc - g) / cr_div
    bc = (maxc - b) / cr_div
    hr = (maxc == r) * (bc - gc)
    hg = ((maxc == g) & (maxc != r)) * (2.0 + rc - bc)
    hb = ((maxc != g) & (maxc != r)) * (4.0 + gc - rc)
    h = torch.fmod((hr + hg + hb) / 6.0 + 1.0, 1.0)
    return torch.stack((h, s, maxc), 1)


def _hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x.unbind(1)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.to(torch.int64) % 6
    p = (v * (1 - s)).clamp(0, 1)
    q = (v * (1 - s * f)).clamp(0, 1)
    t = (v * (1 - s * (1 - f))).clamp(0, 1)
    mask = i.unsqueeze(1) == torch.arange(6).view(1, -1, 1, 1)
    a1 = torch.stack((v, q, p, p, t, v), 1)
    a2 = torch.stack((t, v, v, q, p, p), 1)
    a3 = torch.stack((p, p, t, v, v, q), 1)
    a4 = torch.stack((a1, a2, a3), 1)  # B x 3 x 6 x H x W
    return (a4 * mask.unsqueeze(1).to(x.dtype)).sum(2)


def adjust_brightness(x, f):
    return _blend(x, torch.zeros_like(x), f)


def adjust_contrast(x, f):
    mean = grayscale(x).mean(dim=(-3, -2, -1), keepdim=True)
    return _blend(x, mean, f)


def adjust_saturation(x, f):
    return _blend(x, grayscale(x), f)


def adjust_hue(x, f):
    hsv = _rgb_to_hsv(x)
    hsv[:, 0] = torch.remainder(hsv[:, 0] + f.view(-1, 1, 1), 1.0)
    return _hsv_to_rgb(hsv)


_JITTER_OPS = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def resized_crop(x: torch.Tensor, boxes: np.ndarray) -> torch.Tensor:
    """Bilinear resample of each box (top, left, h, w) back to full size."""
    _, _, height, width = x.shape
    top, left, h, w = (torch.as_tensor(boxes[:, j], dtype=x.dtype) for j in range(4))
    theta = torch.zeros(len(boxes), 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = w / width
    theta[:, 0, 2] = (2 * left + w) / width - 1
    theta[:, 1, 1] = h / height
    theta[:, 1, 2] = (2 * top + h) / height - 1
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def apply_params(x: torch.Tensor, params: ChainParams, policy: AugmentationPolicy) -> torch.Tensor:
    """Apply sampled chains to a B x 3 x H x W batch in [0, 1]; returns normalized views."""
    x = x.clone()
    height, width = x.shape[-2:]
    full = (params.boxes[:, 2] == height) & (params.boxes[:, 3] == width)
    crop = np.flatnonzero(~full)
    if crop.size:
        x[crop] = resized_crop(x[crop], params.boxes[crop])
    flip = np.flatnonzero(params.flip)
    if flip.size:
        x[flip] = x[flip].flip(-1)
    factors = torch.as_tensor(params.factors, dtype=x.dtype)
    identity = (1.0, 1.0, 1.0, 0.0)
    for step in range(4):
        for op in range(4):
            idx = np.flatnonzero(params.jitter & (params.order[:, step] == op))
            if idx.size == 0 or policy.color_jitter[op] == 0:
                continue
            f = factors[idx, op]
            if torch.all(f == identity[op]):
                continue
            x[idx] = _JITTER_OPS[op](x[idx], f)
    gray = np.flatnonzero(params.gray)
    if gray.size:
        x[gray] = grayscale(x[gray]).expand(-1, 3, -1, -1)
    return normalize(x.clamp(0, 1), policy.mean, policy.std)


# --- public view API -------------------------------------------------------


def batch_views(images: np.ndarray, policy: AugmentationPolicy, rng, n_views: int = 1
                ) -> list[torch.Tensor]:
    """``n_views`` batches of B x 3 x H x W views of ``images`` (B x H x W x 3).

    Parameters are drawn image by image (all views of image i before image
    i+1), so a batch reproduces the per-record ``two_view``/``single_view``
    calls made with the same generator.
    """
    rng = _as_rng(rng)
    images = np.asarray(images, dtype=np.uint8)
    n, height, width = images.shape[:3]
    params = sample_params(policy, rng, n * n_views, height, width)
    x = to_tensor(images).repeat_interleave(n_views, dim=0)
    out = apply_params(x, params, policy)
    return [out[j::n_views] for j in range(n_views)]


def single_view(x, policy: AugmentationPolicy, rng) -> torch.Tensor:
    return batch_views(_pixels(x)[None], policy, rng, 1)[0][0]


def two_view(x, policy: AugmentationPolicy, rng) -> ViewPair:
    """Two independently sampled transform chains applied to the same image."""
    v, v_prime = batch_views(_pixels(x)[None], policy, rng, 2)
    return ViewPair(v[0], v_prime[0])


def eval_view(x, mean=CIFAR_MEAN, std=CIFAR_STD) -> torch.Tensor:
    return normalize(to_tensor(_pixels(x)), mean, std)


def eval_batch(images: np.ndarray, mean: Sequence[float] = CIFAR_MEAN,
               std: Sequence[float] = CIFAR_STD) -> torch.Tensor:
    return normalize(to_tensor(images), mean, std)
