"""Training objectives: NT-Xent, SimSiam negative cosine, and the distillation loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateInputError


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise DegenerateInputError(f"{what} contains a zero-norm row")
    return x / norms


def nt_xent(projections: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalized-temperature cross entropy over 2B rows.

    Rows 2i and 2i+1 are the positive pair of sample i; every other row in the
    batch is a negative. The anchor's own similarity is left out of the
    denominator.
    """
    if projections.ndim != 2 or projections.shape[0] % 2 or projections.shape[0] == 0:
        raise ValueError(f"expected 2B x d projections, got {tuple(projections.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = _unit_rows(projections, "projections")
    n = z.shape[0]
    logits = z @ z.T / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positive = torch.arange(n, device=z.device) ^ 1
    return F.cross_entropy(logits, positive)


def pair_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Interleave two B x d views into the 2B x d layout ``nt_xent`` expects."""
    return torch.stack((a, b), dim=1).reshape(-1, a.shape[1])


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return -(_unit_rows(p, "predictions") * _unit_rows(z, "targets")).sum(1).mean()


def simsiam_loss(p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Symmetrized negative cosine; targets z1, z2 are gradient-detached."""
    if not (p1.shape == p2.shape == z1.shape == z2.shape):
        raise ValueError("simsiam_loss inputs must share one B x d shape")
    return 0.5 * negative_cosine(p1, stop_gradient(z2)) + 0.5 * negative_cosine(p2, stop_gradient(z1))


def distill_terms(r_base: torch.Tensor, r_expert: torch.Tensor, q_base: torch.Tensor,
                  q_expert: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """The two half-weighted MSE terms; teacher targets are detached."""
    if not (r_base.shape == r_expert.shape == q_base.shape == q_expert.shape) or r_base.ndim != 2:
        raise ValueError("distill_loss inputs must share one B x d shape")
    base = 0.5 * F.mse_loss(r_base, stop_gradient(q_base))
    expert = 0.5 * F.mse_loss(r_expert, stop_gradient(q_expert))
    return base, expert


def distill_loss(r_base: torch.Tensor, r_expert: torch.Tensor, q_base: torch.Tensor,
                 q_expert: torch.Tensor) -> torch.Tensor:
    """0.5 * MSE(r_base(q_s), q_base) + 0.5 * MSE(r_k(q_s), q_expert(k)).

    ``r_base``/``r_expert`` are the student's regression-head outputs; MSE
    averages over all B*d elements.
    """
    base, expert = distill_terms(r_base, r_expert, q_base, q_expert)
    return base + expert
