"""Topology-aware node embeddings and periodic time embeddings.

Node embeddings come from the eigenvectors of the symmetric normalized graph
Laplacian ``L = I - D^{-1/2} A D^{-1/2}``.  The eigenvectors belonging to the
K *largest* eigenvalues are kept, sign-fixed and passed through a linear
layer, so the embedding width never depends on the number of nodes and a
trained model can be moved to a different graph.

Time embeddings are two lookup tables, time-of-day and day-of-week.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ShapeError, ValidationError

SECONDS_PER_DAY = 86_400
# 1970-01-01 was a Thursday; shift so that Monday == 0.
_EPOCH_WEEKDAY = 3


@dataclass
class SensorGraph:
    """Directed weighted sensor graph.

    ``adjacency`` is the dense N x N matrix actually used by the model; the edge
    list is kept for bookkeeping (edge counts, re-serialization).
    """

    n_nodes: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    adjacency: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.n_nodes <= 0:
            raise ValidationError(f"n_nodes must be positive, got {self.n_nodes}")
        if self.adjacency is None:
            self.adjacency = adjacency_from_edges(self.n_nodes, self.edges, binarize=False)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if self.adjacency.shape != (self.n_nodes, self.n_nodes):
            raise ShapeError(
                f"adjacency shape {self.adjacency.shape} does not match n_nodes={self.n_nodes}"
            )
        if np.any(self.adjacency < 0):
            raise ValidationError("adjacency entries must be nonnegative")

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "SensorGraph":
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ShapeError(f"adjacency must be square, got {adjacency.shape}")
        rows, cols = np.nonzero(adjacency)
        edges = [(int(i), int(j), float(adjacency[i, j])) for i, j in zip(rows, cols)]
        return cls(adjacency.shape[0], edges, adjacency)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def symmetrized(self) -> np.ndarray:
        return symmetrize(self.adjacency)


def adjacency_from_edges(
    n_nodes: int, edges: Sequence[tuple[int, int, float]], binarize: bool = True
) -> np.ndarray:
    adjacency = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    for src, dst, weight in edges:
        if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
            raise ValidationError(f"edge ({src}, {dst}) references a node outside [0, {n_nodes})")
        if weight < 0:
            raise ValidationError(f"edge ({src}, {dst}) has negative weight {weight}")
        adjacency[src, dst] = 1.0 if binarize else weight
    return adjacency


def symmetrize(adjacency: np.ndarray) -> np.ndarray:
    adjacency = np.asarray(adjacency, dtype=np.float64)
    return 0.5 * (adjacency + adjacency.T)


def normalized_laplacian(adjacency: np.ndarray | SensorGraph) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^{-1/2} A D^{-1/2}``.

    The input must already be symmetric (use :func:`symmetrize`).  Isolated
    nodes get a zero inverse-square-root degree, so their row of L is the
    identity row.
    """
    if isinstance(adjacency, SensorGraph):
        adjacency = adjacency.symmetrized()
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {a.shape}")
    if np.any(a < 0):
        raise ValidationError("adjacency entries must be nonnegative")
    degree = a.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    nonzero = degree > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degree[nonzero])
    lap = np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    # exact symmetry; the product above can differ in the last ulp
    return 0.5 * (lap + lap.T)


@dataclass
class SpectralBasis:
    eigenvalues: np.ndarray  # (K,) descending, zero-padded past k_effective
    vectors: np.ndarray  # (N, K)
    k_requested: int
    k_effective: int


def _fix_signs(vectors: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vectors = vectors.copy()
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        mags = np.abs(col)
        if mags.max() == 0:
            continue
        # first index whose magnitude ties the maximum; tolerates rounding noise
        idx = int(np.flatnonzero(mags >= mags.max() - tol)[0])
        if col[idx] < 0:
            vectors[:, j] = -col
    return vectors


def spectral_basis(laplacian: np.ndarray, k: int) -> SpectralBasis:
    """Eigenvectors of the ``k`` largest eigenvalues, descending, sign-fixed.

    When ``k`` exceeds the number of nodes the missing columns are zeros so the
    basis width stays ``k``.
    """
    lap = np.asarray(laplacian, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ShapeError(f"laplacian must be square, got shape {lap.shape}")
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    n = lap.shape[0]
    try:
        evals, evecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        asym = float(np.max(np.abs(lap - lap.T))) if np.all(np.isfinite(lap)) else float("nan")
        raise NumericalError(
            f"eigendecomposition failed for N={n}: {exc}; "
            f"finite={bool(np.all(np.isfinite(lap)))}, max asymmetry={asym:.3g}"
        ) from exc
    # stable sort keeps ascending original column order inside ties
    order = np.argsort(-evals, kind="stable")
    k_eff = min(k, n)
    chosen = order[:k_eff]
    vectors = np.zeros((n, k), dtype=np.float64)
    vectors[:, :k_eff] = _fix_signs(evecs[:, chosen])
    eigenvalues = np.zeros(k, dtype=np.float64)
    eigenvalues[:k_eff] = evals[chosen]
    return SpectralBasis(eigenvalues, vectors, k, k_eff)


def graph_basis(graph: SensorGraph, k: int) -> SpectralBasis:
    return spectral_basis(normalized_laplacian(graph.symmetrized()), k)


def node_embedding(basis: SpectralBasis | np.ndarray, weights, bias) -> np.ndarray:
    """Functional form of the node embedding: ``V' W + b``."""
    vectors = basis.vectors if isinstance(basis, SpectralBasis) else np.asarray(basis)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != vectors.shape[1]:
        raise ShapeError(
            f"weights shape {weights.shape} incompatible with basis width {vectors.shape[1]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return vectors @ weights + bias


class NodeEmbedding(nn.Module):
    """Linear map from the (N, K) spectral basis to (N, d_n) embeddings."""

    def __init__(self, k: int, d_n: int):
        super().__init__()
        self.k = k
        self.proj = nn.Linear(k, d_n)

    def forward(self, basis: torch.Tensor) -> torch.Tensor:
        if basis.shape[-1] != self.k:
            raise ShapeError(f"basis width {basis.shape[-1]} != K={self.k}")
        return self.proj(basis)


def steps_per_day(interval_seconds: int) -> int:
    if interval_seconds <= 0 or SECONDS_PER_DAY % interval_seconds:
        raise ValidationError(
            f"interval_seconds={interval_seconds} must be positive and divide {SECONDS_PER_DAY}"
        )
    return SECONDS_PER_DAY // interval_seconds


def time_indices(timestamps, interval_seconds: int) -> tuple[np.ndarray, np.ndarray]:
    """Time-of-day and day-of-week (Monday = 0) indices for epoch-second stamps.

    Timestamps are read as naive calendar time (no timezone conversion).
    """
    steps_per_day(interval_seconds)
    ts = np.asarray(timestamps, dtype=np.int64)
    if np.any(ts % interval_seconds):
        bad = ts[ts % interval_seconds != 0][:3]
        raise ValidationError(f"timestamps not aligned to {interval_seconds}s interval: {bad.tolist()}")
    seconds = ts % SECONDS_PER_DAY
    days = ts // SECONDS_PER_DAY
    return seconds // interval_seconds, (days + _EPOCH_WEEKDAY) % 7


class TimeEmbedding(nn.Module):
    """Time-of-day and day-of-week lookup tables, concatenated per step."""

    def __init__(self, d_t: int, interval_seconds: int = 300):
        super().__init__()
        self.d_t = d_t
        self.interval_seconds = interval_seconds
        self.steps_per_day = steps_per_day(interval_seconds)
        self.tod_table = nn.Parameter(torch.empty(self.steps_per_day, d_t))
        self.dow_table = nn.Parameter(torch.empty(7, d_t))
        bound = 1.0 / math.sqrt(d_t)
        nn.init.uniform_(self.tod_table, -bound, bound)
        nn.init.uniform_(self.dow_table, -bound, bound)

    def forward(self, tod: torch.Tensor, dow: torch.Tensor, n_nodes: int) -> torch.Tensor:
        """Map (..., T) index tensors to a (..., T, N, 2*d_t) embedding."""
        tod = torch.as_tensor(tod, dtype=torch.long, device=self.tod_table.device)
        dow = torch.as_tensor(dow, dtype=torch.long, device=self.tod_table.device)
        if tod.shape != dow.shape:
            raise ShapeError(f"tod shape {tuple(tod.shape)} != dow shape {tuple(dow.shape)}")
        if tod.numel() and (tod.min() < 0 or tod.max() >= self.steps_per_day):
            raise ValidationError(f"time-of-day index outside [0, {self.steps_per_day})")
        if dow.numel() and (dow.min() < 0 or dow.max() >= 7):
            raise ValidationError("day-of-week index outside [0, 7)")
        emb = torch.cat([self.tod_table[tod], self.dow_table[dow]], dim=-1)
        return emb.unsqueeze(-2).expand(*emb.shape[:-1], n_nodes, emb.shape[-1])


def lookup_time_embedding(
    tables: TimeEmbedding, tod: Sequence[int], dow: Sequence[int], n_nodes: int
) -> torch.Tensor:
    return tables(torch.as_tensor(tod), torch.as_tensor(dow), n_nodes)
