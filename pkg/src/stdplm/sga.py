"""Sandglass attention: N node tokens -> M region tokens -> N node tokens.

The precoder lets M learnable queries attend over the node tokens; the decoder
lets node tokens attend over the same queries, reading values from the
backbone's region outputs.  Query/key projections live in a d_H-wide space;
values stay d_PLM wide so region tokens go straight into the backbone.
"""
from __future__ import annotations

import math
import warnings

import torch
from torch import nn

from .errors import ShapeError


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """``softmax(Q K^T / sqrt(d_k)) V``; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class _ProjectedAttention(nn.Module):
    def __init__(self, d_model: int, d_hidden: int, n_heads: int = 1):
        super().__init__()
        if d_hidden % n_heads or d_model % n_heads:
            raise ShapeError(f"{n_heads} heads must divide d_H={d_hidden} and d_PLM={d_model}")
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_hidden)
        self.k_proj = nn.Linear(d_model, d_hidden)
        self.norm = nn.LayerNorm(d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., L, D) -> (..., h, L, D/h)
        h = self.n_heads
        return x.reshape(*x.shape[:-1], h, x.shape[-1] // h).movedim(-2, -3)

    def forward(self, queries, keys, values) -> tuple[torch.Tensor, torch.Tensor]:
        q, k = self.q_proj(queries), self.k_proj(keys)
        if self.n_heads == 1:
            out, weights = scaled_dot_attention(q, k, values)
        else:
            out, weights = scaled_dot_attention(self._split(q), self._split(k), self._split(values))
            out = out.movedim(-3, -2).flatten(-2)
            weights = weights.mean(dim=-3)
        return self.norm(out), weights


class SandglassAttention(nn.Module):
    def __init__(self, n_regions: int, d_plm: int, d_hidden: int, n_heads: int = 1):
        super().__init__()
        self.n_regions = n_regions
        self.queries = nn.Parameter(torch.randn(n_regions, d_plm) * 0.02)
        self.precoder = _ProjectedAttention(d_plm, d_hidden, n_heads)
        self.decoder = _ProjectedAttention(d_plm, d_hidden, n_heads)

    def check_graph_size(self, n_nodes: int) -> None:
        if self.n_regions >= n_nodes:
            warnings.warn(
                f"{self.n_regions} region tokens for {n_nodes} nodes: "
                "compression gives no speed-up when M >= N",
                stacklevel=2,
            )

    def _queries_like(self, z: torch.Tensor) -> torch.Tensor:
        return self.queries.expand(*z.shape[:-2], *self.queries.shape)

    def precode(self, z_s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., N, d) node tokens -> (..., M, d) region tokens and (..., M, N) weights S."""
        return self.precoder(self._queries_like(z_s), z_s, z_s)

    def decode(self, z_s: torch.Tensor, z_h_out: torch.Tensor) -> torch.Tensor:
        """Node tokens query the region queries; values are the backbone's region outputs."""
        if z_h_out.shape[-2] != self.n_regions:
            raise ShapeError(f"expected {self.n_regions} region outputs, got {z_h_out.shape[-2]}")
        out, _ = self.decoder(z_s, self._queries_like(z_s), z_h_out)
        return out


class FullSelfAttention(nn.Module):
    """N x N single-head self-attention with d_PLM-wide projections.

    Reference point for what attending over every node token would cost.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out, _ = scaled_dot_attention(self.q_proj(z), self.k_proj(z), self.v_proj(z))
        return self.norm(out)
