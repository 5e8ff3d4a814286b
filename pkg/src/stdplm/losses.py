"""Masked L1 objective and the attention-constraint losses.

The constraint loss acts on the precoder weights ``S`` (M x N, rows on the
simplex):

* structure loss ``-sum_m sum_{i != j} S[m,i] S[m,j] A[i,j]`` rewards regions
  that gather mass on well-connected node sets;
* Dirichlet regularizer ``-log Dir(softmax(sum_m S[m,:]) | alpha)`` keeps the
  total attention per node close to ``alpha / sum(alpha)`` so no node starves.

All functions accept an optional leading batch axis and average over it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, ShapeError, ValidationError


def _tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if like is None else x.to(dtype=like.dtype, device=like.device)
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype, device=None if like is None else like.device)


def masked_l1(y, target, mask) -> torch.Tensor:
    """Mean absolute error over entries where ``mask`` is 1."""
    y = _tensor(y)
    target, mask = _tensor(target, y), _tensor(mask, y)
    if y.shape != target.shape or y.shape != mask.shape:
        raise ShapeError(f"shapes differ: y {tuple(y.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}")
    count = mask.sum()
    if count <= 0:
        raise ValidationError("evaluation mask has no active entries")
    # where() keeps NaNs at masked-out positions from leaking into the sum
    err = torch.where(mask > 0, (y - target).abs(), torch.zeros_like(y))
    return err.sum() / count


def structure_loss(s, adjacency) -> torch.Tensor:
    """``-sum_m sum_{i != j} S[m,i] S[m,j] A[i,j]``, averaged over any batch axis."""
    s = _tensor(s)
    a = _tensor(adjacency, s)
    n = s.shape[-1]
    if a.shape != (n, n):
        raise ShapeError(f"adjacency shape {tuple(a.shape)} incompatible with S width {n}")
    a = a * (1 - torch.eye(n, dtype=a.dtype, device=a.device))
    per_region = torch.einsum("...mi,ij,...mj->...m", s, a, s)
    loss = -per_region.sum(dim=-1)
    return loss.mean() if loss.dim() else loss


def alpha_from_graph(adjacency) -> torch.Tensor:
    """Dirichlet concentration ``1.05 + softmax(degree)`` from the symmetrized adjacency."""
    a = _tensor(adjacency)
    if a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {tuple(a.shape)}")
    if (a < 0).any():
        raise ValidationError("adjacency entries must be nonnegative")
    degree = (0.5 * (a + a.T)).sum(dim=1)
    return 1.05 + torch.softmax(degree, dim=0)


def dirichlet_log_density(p: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return (
        torch.lgamma(alpha.sum(-1))
        - torch.lgamma(alpha).sum(-1)
        + ((alpha - 1) * torch.log(p)).sum(-1)
    )


def dirichlet_regularizer(s, alpha) -> torch.Tensor:
    """Negative Dirichlet log-density of ``softmax(sum_m S[m,:])``."""
    s = _tensor(s)
    alpha = _tensor(alpha, s)
    if alpha.shape != (s.shape[-1],):
        raise ShapeError(f"alpha shape {tuple(alpha.shape)} != ({s.shape[-1]},)")
    if (alpha <= 0).any():
        raise ValidationError("Dirichlet concentration must be positive")
    p = torch.softmax(s.sum(dim=-2), dim=-1)
    if (p <= 0).any():
        raise NumericalError("softmax underflowed to zero; Dirichlet log-density undefined")
    loss = -dirichlet_log_density(p, alpha)
    return loss.mean() if loss.dim() else loss


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    l_g: torch.Tensor
    l_r: torch.Tensor
    total: torch.Tensor
    lambda_c: float

    def as_floats(self) -> dict[str, float]:
        return {
            "l1": self.l1.item(),
            "l_g": self.l_g.item(),
            "l_r": self.l_r.item(),
            "total": self.total.item(),
            "lambda_c": self.lambda_c,
        }


def total_loss(y, target, eval_mask, s, adjacency, alpha, lambda_c: float = 0.1) -> LossBreakdown:
    l1 = masked_l1(y, target, eval_mask)
    l_g = structure_loss(s, adjacency)
    l_r = dirichlet_regularizer(s, alpha)
    total = l1 + lambda_c * (l_g.to(l1.dtype) + l_r.to(l1.dtype))
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss: l1={l1.item()}, l_g={l_g.item()}, l_r={l_r.item()}")
    return LossBreakdown(l1, l_g, l_r, total, lambda_c)
