"""Spatial (one token per node) and temporal (state + trend) tokenizers."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError, ValidationError


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


def fill_missing(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the entries where ``mask == 0`` (zero is the mean in z-scored space)."""
    if x.shape != mask.shape:
        raise ShapeError(f"x shape {tuple(x.shape)} != mask shape {tuple(mask.shape)}")
    return torch.where(mask.bool(), x, torch.zeros_like(x))


def _flatten_time(x: torch.Tensor) -> torch.Tensor:
    # (..., T, N, F) -> (..., N, T*F), time-major inside each node's vector
    x = x.movedim(-2, -3)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


class SpatialTokenizer(nn.Module):
    """Builds one d_PLM token per node from its intrinsic, dynamic and mask state.

    Every MLP sees the node's whole window with time folded into the feature
    axis, so node ``n``'s token depends only on node ``n``'s inputs.
    """

    def __init__(self, t_in: int, channels: int, d_t: int, d_n: int, d_plm: int):
        super().__init__()
        self.t_in = t_in
        self.channels = channels
        self.intrinsic = mlp(t_in * (2 * d_t + d_n), d_plm, d_plm)
        self.dynamic = mlp(t_in * channels, d_plm, d_plm)
        self.mask = mlp(t_in * channels, d_plm, d_plm)
        self.norm = nn.LayerNorm(d_plm)

    def forward(
        self, x: torch.Tensor, mask: torch.Tensor, time_emb: torch.Tensor, node_emb: torch.Tensor
    ) -> torch.Tensor:
        """x, mask: (B, T, N, C); time_emb: (B, T, N, 2d_t); node_emb: (N, d_n) -> (B, N, d_PLM)."""
        if x.shape[-3] != self.t_in:
            raise ShapeError(f"window length {x.shape[-3]} != configured T={self.t_in}")
        if x.shape[-1] != self.channels:
            raise ShapeError(f"channel count {x.shape[-1]} != configured C={self.channels}")
        if x.shape != mask.shape:
            raise ShapeError(f"x shape {tuple(x.shape)} != mask shape {tuple(mask.shape)}")
        if torch.isnan(x).any():
            raise ValidationError("spatial tokenizer input contains NaN; fill missing entries first")
        node = node_emb.expand(*time_emb.shape[:-1], node_emb.shape[-1])
        intrinsic = self.intrinsic(_flatten_time(torch.cat([time_emb, node], dim=-1)))
        dynamic = self.dynamic(_flatten_time(x))
        missing = self.mask(_flatten_time(mask.to(x.dtype)))
        return self.norm(dynamic + intrinsic + missing)


class TemporalTokenizer(nn.Module):
    """Two system-level tokens: overall state (node mean) and trend (its first difference)."""

    def __init__(self, t_in: int, channels: int, d_t: int, d_plm: int):
        super().__init__()
        if t_in < 2:
            raise ValidationError(f"temporal trend needs T >= 2, got {t_in}")
        self.t_in = t_in
        self.state = mlp(t_in * channels + 2 * d_t, d_plm, d_plm)
        self.trend = mlp((t_in - 1) * channels + 2 * d_t, d_plm, d_plm)
        self.norm = nn.LayerNorm(d_plm)

    @staticmethod
    def node_mean(x: torch.Tensor) -> torch.Tensor:
        """(..., T, N, C) -> (..., T, C) mean over nodes."""
        return x.mean(dim=-2)

    def forward(self, x: torch.Tensor, time_emb: torch.Tensor) -> torch.Tensor:
        """x: (B, T, N, C), time_emb: (B, T, N, 2d_t) -> (B, 2, d_PLM), rows (state, trend)."""
        if x.shape[-3] < 2:
            raise ValidationError("temporal tokens need at least two time steps")
        if x.shape[-3] != self.t_in:
            raise ShapeError(f"window length {x.shape[-3]} != configured T={self.t_in}")
        mean = self.node_mean(x)
        trend = mean[..., 1:, :] - mean[..., :-1, :]
        last = time_emb[..., -1, 0, :]
        z_state = self.state(torch.cat([mean.flatten(-2), last], dim=-1))
        z_trend = self.trend(torch.cat([trend.flatten(-2), last], dim=-1))
        return self.norm(torch.stack([z_state, z_trend], dim=-2))
