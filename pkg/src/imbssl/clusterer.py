"""Feature extraction, k-means (k-means++ seeding + Lloyd), partitioning, PCA."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import CIFAR_MEAN, CIFAR_STD, eval_batch
from .dataset import LabeledDataset
from .errors import PipelineError
from .nn_core import ModelBundle, encode, project


@dataclass
class FeatureMatrix:
    values: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.values.ndim != 2 or len(self.values) != len(self.indices):
            raise ValueError("values must be N x d with one index per row")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)  # inertia after each assignment step
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.centroids)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.K).tolist()


@torch.no_grad()
def extract_features(bundle: ModelBundle, dataset: LabeledDataset, mean=CIFAR_MEAN, std=CIFAR_STD,
                     batch_size: int = 512, space: str = "backbone") -> FeatureMatrix:
    """Eval-mode features of every record, in dataset order."""
    was_training = bundle.net.training
    bundle.eval()
    out = []
    try:
        for start in range(0, len(dataset), batch_size):
            x = eval_batch(dataset.images[start:start + batch_size], mean, std)
            f = encode(bundle, x)
            if space == "projector":
                f = project(bundle, f)
            out.append(f.double().cpu().numpy())
    finally:
        bundle.net.train(was_training)
    values = np.concatenate(out) if out else np.zeros((0, bundle.dim))
    return FeatureMatrix(values, np.arange(len(dataset)))


def _as_array(X) -> np.ndarray:
    return np.asarray(X.values if isinstance(X, FeatureMatrix) else X, dtype=np.float64)


def _sq_dists(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Squared distances via explicit differences (no expansion cancellation)."""
    out = np.empty((len(X), len(C)))
    for s in range(0, len(X), chunk):
        diff = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _inertia(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> float:
    diff = X - C[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    history = []
    labels = _sq_dists(X, centroids).argmin(1)
    history.append(_inertia(X, centroids, labels))
    it = 0
    for it in range(1, max_iters + 1):
        new = centroids.copy()
        for k in range(len(centroids)):
            members = labels == k
            if members.any():
                new[k] = X[members].mean(0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        labels = _sq_dists(X, centroids).argmin(1)
        history.append(_inertia(X, centroids, labels))
        if shift < tol:
            break
    return centroids, labels, history, it


def _hartigan(X: np.ndarray, labels: np.ndarray, K: int, max_passes: int = 100) -> np.ndarray:
    """Single-point transfers: move x from a to b whenever
    |b|/(|b|+1) ||x - c_b||^2 < |a|/(|a|-1) ||x - c_a||^2, i.e. whenever the
    move lowers inertia with both centroids updated exactly. A partition that
    admits no such move is also a Lloyd fixed point."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    C = np.stack([X[labels == k].mean(0) for k in range(K)])
    for _ in range(max_passes):
        # vectorized screen: stop when no point has an improving move
        d = _sq_dists(X, C)
        own = d[np.arange(len(X)), labels]
        with np.errstate(divide="ignore", invalid="ignore"):
            stay = np.where(counts[labels] > 1, counts[labels] / (counts[labels] - 1) * own, np.inf)
        move = counts / (counts + 1) * d
        move[np.arange(len(X)), labels] = np.inf
        if not np.any(move.min(1) < stay):
            break
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            di = ((C - X[i]) ** 2).sum(1)
            cost = counts / (counts + 1) * di
            cost[a] = counts[a] / (counts[a] - 1) * di[a]
            b = int(cost.argmin())
            if b != a and cost[b] < cost[a]:
                C[a] = (C[a] * counts[a] - X[i]) / (counts[a] - 1)
                C[b] = (C[b] * counts[b] + X[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
    return labels


def kmeans(X, K: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-4,
           n_init: int = 10, refine: bool = True) -> ClusterModel:
    """Best of ``n_init`` k-means++-seeded Lloyd runs (lowest inertia).

    With ``refine`` each Lloyd result is polished by Hartigan transfers, which
    escape many of Lloyd's poor fixed points at little cost.
    """
    X = _as_array(X)
    n = len(X)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = kmeans_plusplus(X, K, rng)
        centroids, labels, history, it = _lloyd(X, init, max_iters, tol)
        if refine and K > 1 and min(np.bincount(labels, minlength=K)) > 0:
            labels = _hartigan(X, labels, K)
            centroids = np.stack([X[labels == k].mean(0) for k in range(K)])
            history.append(_inertia(X, centroids, labels))
        inertia = _inertia(X, centroids, labels)
        if best is None or inertia < best.inertia:
            best = ClusterModel(centroids, labels, inertia, it, history, seed)
    return best


def assign(model: ClusterModel, X) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index."""
    X = _as_array(X)
    if X.ndim != 2 or X.shape[1] != model.centroids.shape[1]:
        raise ValueError(f"expected N x {model.centroids.shape[1]} features, got {X.shape}")
    return _sq_dists(X, model.centroids).argmin(1)


def kmeans_nonempty(X, K: int, seed: int = 0, retries: int = 5, **kw) -> ClusterModel:
    """k-means that re-seeds (seed+1, seed+2, ...) while any cluster is empty."""
    for attempt in range(retries + 1):
        model = kmeans(X, K, seed + attempt, **kw)
        if min(model.sizes()) > 0:
            return model
    raise PipelineError(f"k-means left an empty cluster after {retries} re-seeds (K={K})")


def partition(dataset: LabeledDataset, labels: Sequence[int], K: int) -> list[LabeledDataset]:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(dataset):
        raise ValueError("one label per record required")
    if len(labels) and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("cluster label outside [0, K)")
    return [dataset.subset(np.flatnonzero(labels == k)) for k in range(K)]


def l2_normalize(X) -> np.ndarray:
    X = _as_array(X)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms == 0, 1.0, norms)


def pca_project(X, out_dim: int = 2) -> np.ndarray:
    """Centered projection on the leading principal axes.

    Axes are ordered by decreasing variance; each axis is signed so that its
    largest-magnitude loading is positive.
    """
    X = _as_array(X)
    if len(X) < 2:
        raise ValueError("PCA needs at least two points")
    if out_dim > X.shape[1]:
        raise ValueError("out_dim exceeds the feature dimension")
    Xc = X - X.mean(0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = vt[:out_dim]
    pivot = np.abs(axes).argmax(1)
    axes = axes * np.sign(axes[np.arange(out_dim), pivot])[:, None]
    return Xc @ axes.T


def write_assignments(path, indices: Sequence[int], labels: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_index", "cluster"])
        w.writerows(zip(map(int, indices), map(int, labels)))
    return path


def read_assignments(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([int(r["record_index"]) for r in rows], dtype=np.int64),
            np.array([int(r["cluster"]) for r in rows], dtype=np.int64))


def write_pca(path, indices, coords: np.ndarray, clusters, true_labels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_index", "pc1", "pc2", "cluster", "true_label"])
        for i, (a, b), k, y in zip(indices, coords[:, :2], clusters, true_labels):
            w.writerow([int(i), repr(float(a)), repr(float(b)), int(k), int(y)])
    return path
