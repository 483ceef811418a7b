"""Brute-force reference implementations for the test suite.

Everything here is plain numpy (float64) written for clarity rather than
speed, and deliberately shares no code with the rest of the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    relative: bool = False

    @property
    def passed(self) -> bool:
        err = self.max_rel_error if self.relative else self.max_abs_error
        return bool(err < self.tolerance)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name}: {status} (abs {self.max_abs_error:.3g}, rel {self.max_rel_error:.3g}, "
                f"tol {self.tolerance:g}{' rel' if self.relative else ''})")


def compare(name: str, got, ref, tolerance: float, relative: bool = False, floor: float = 1e-12) -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if got.shape != ref.shape:
        raise ValueError(f"{name}: shape {got.shape} vs reference {ref.shape}")
    diff = np.abs(got - ref)
    abs_err = float(diff.max()) if diff.size else 0.0
    rel = diff / np.maximum(np.abs(ref), floor)
    rel_err = float(rel.max()) if rel.size else 0.0
    return OracleReport(name, abs_err, rel_err, tolerance, relative)


# --- losses ----------------------------------------------------------------


def _cosine(a, b) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def nt_xent_bruteforce(projections, temperature: float = 0.5) -> float:
    """Rows 2i and 2i+1 are a positive pair; every other row is a negative."""
    Z = np.asarray(projections, dtype=np.float64)
    n = Z.shape[0]
    if n % 2:
        raise ValueError("need an even number of rows")
    sim = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            sim[i, j] = _cosine(Z[i], Z[j]) / temperature
    total = 0.0
    for i in range(n):
        pos = i + 1 if i % 2 == 0 else i - 1
        denom = sum(math.exp(sim[i, k]) for k in range(n) if k != i)
        total += -math.log(math.exp(sim[i, pos]) / denom)
    return total / n


def simsiam_direct(p1, p2, z1, z2) -> float:
    """-(1/2) mean cos(p1, z2) - (1/2) mean cos(p2, z1)."""
    p1, p2, z1, z2 = (np.asarray(a, dtype=np.float64) for a in (p1, p2, z1, z2))
    B = p1.shape[0]
    a = sum(_cosine(p1[i], z2[i]) for i in range(B)) / B
    b = sum(_cosine(p2[i], z1[i]) for i in range(B)) / B
    return -0.5 * a - 0.5 * b


def distill_direct(r_base, r_expert, q_base, q_expert) -> float:
    """(1/2) MSE(r_base, q_base) + (1/2) MSE(r_expert, q_expert), elementwise mean."""
    def mse(a, b):
        a = np.asarray(a, dtype=np.float64).ravel()
        b = np.asarray(b, dtype=np.float64).ravel()
        return sum((x - y) ** 2 for x, y in zip(a, b)) / a.size
    return 0.5 * mse(r_base, q_base) + 0.5 * mse(r_expert, q_expert)


def finite_diff_grad(fn: Callable[..., float], inputs: Sequence[np.ndarray], step: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. every input."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = fn(*arrays)
            flat[k] = orig - step
            down = fn(*arrays)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
        grads.append(g)
    return grads


# --- optimizers ------------------------------------------------------------


def cosine_lr_reference(step: int, total: int, base: float) -> float:
    return base * 0.5 * (1 + math.cos(math.pi * step / total))


def momentum_recurrence(w0: float, grads: Sequence[float], lr: float, momentum: float,
                        weight_decay: float = 0.0) -> list[float]:
    """Scalar heavy-ball SGD: b <- m b + (g + wd w); w <- w - lr b."""
    w, b, out = float(w0), 0.0, []
    for g in grads:
        b = momentum * b + (g + weight_decay * w)
        w = w - lr * b
        out.append(w)
    return out


def trust_ratio_reference(w, g, weight_decay: float, eta: float) -> float:
    wn = math.sqrt(sum(float(x) ** 2 for x in np.ravel(w)))
    gn = math.sqrt(sum(float(x) ** 2 for x in np.ravel(g)))
    denom = gn + weight_decay * wn
    if wn == 0 or denom == 0:
        return 0.0
    return eta * wn / denom


# --- clustering ------------------------------------------------------------


def stirling2(n: int, k: int) -> int:
    return sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1)) // math.factorial(k)


def set_partitions(n: int, k: int):
    """All labelings of n points into exactly k non-empty unlabeled blocks
    (restricted growth strings)."""
    def rec(prefix, used):
        i = len(prefix)
        if i == n:
            if used == k:
                yield tuple(prefix)
            return
        if used + (n - i) < k:
            return
        for b in range(min(used + 1, k)):
            yield from rec(prefix + [b], max(used, b + 1))
    yield from rec([], 0)


def partition_inertia(X, labels) -> float:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for b in np.unique(labels):
        pts = X[labels == b]
        c = pts.mean(axis=0)
        total += float(((pts - c) ** 2).sum())
    return total


@dataclass(frozen=True)
class BruteForceKMeans:
    inertia: float
    labels: tuple
    partitions_checked: int


def kmeans_bruteforce(X, K: int, max_points: int = 8) -> BruteForceKMeans:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n > max_points:
        raise ValueError(f"{n} points is too many for exhaustive enumeration (max {max_points})")
    if not 1 <= K <= n:
        raise ValueError("need 1 <= K <= N")
    best, best_labels, count = math.inf, None, 0
    for labels in set_partitions(n, K):
        count += 1
        val = partition_inertia(X, labels)
        if val < best:
            best, best_labels = val, labels
    return BruteForceKMeans(best, best_labels, count)


def pca_reference(X, out_dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """(projection, eigenvalues) from the covariance eigendecomposition."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dim]
    return Xc @ vecs[:, order], vals[order]


def same_partition(a, b) -> bool:
    """True when two labelings group points identically (up to relabeling)."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


# --- dataset ---------------------------------------------------------------


def imbalanced_count_reference(n_c: int, p: float, c: int, num_classes: int, digits: int = 60) -> int:
    """floor(n_c * p^(-c/(C-1))) evaluated with high-precision arithmetic."""
    import mpmath

    with mpmath.workdps(digits):
        value = mpmath.mpf(n_c) * mpmath.power(mpmath.mpf(p), -mpmath.mpf(c) / (num_classes - 1))
        nearest = mpmath.nint(value)
        # exact integers may land a few ulps below at finite precision
        if abs(value - nearest) < mpmath.mpf(10) ** (-(digits - 10)):
            return int(nearest)
        return int(mpmath.floor(value))
