"""Missing-data patterns (random, continuous) and condition-missing sampling.

Masks use 1 = observed/kept and 0 = missing.
"""
from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ValidationError
from .spectral import SensorGraph


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"missing rate must lie in [0, 1], got {rate}")


def generate_rm(shape: tuple[int, ...], rate: float, seed: int) -> np.ndarray:
    """Random missing: each cell dropped independently with probability ``rate``."""
    _check_rate(rate)
    return np.random.default_rng(seed).random(shape) >= rate


def _spectral_regions(adjacency: np.ndarray, n_regions: int, seed: int) -> np.ndarray:
    from sklearn.cluster import SpectralClustering

    n = adjacency.shape[0]
    if n_regions <= 1 or n <= n_regions:
        return np.arange(n) if n <= n_regions else np.zeros(n, dtype=int)
    affinity = adjacency + 1e-6 * (adjacency.sum() == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        model = SpectralClustering(n_clusters=n_regions, affinity="precomputed", random_state=seed)
        return model.fit_predict(affinity)


def graph_regions(graph: SensorGraph | np.ndarray, n_regions: int | None = None, seed: int = 0) -> np.ndarray:
    """Partition nodes into regions by spectral clustering of the symmetrized adjacency.

    Disconnected graphs are clustered component by component, with region
    counts allotted in proportion to component size.
    """
    adjacency = graph.symmetrized() if isinstance(graph, SensorGraph) else 0.5 * (graph + graph.T)
    adjacency = (adjacency > 0).astype(float)
    np.fill_diagonal(adjacency, 0.0)
    n = adjacency.shape[0]
    n_regions = n_regions or max(2, n // 32)
    n_comp, comp = connected_components(adjacency, directed=False)
    if n_comp == 1:
        return _spectral_regions(adjacency, n_regions, seed)
    labels = np.empty(n, dtype=int)
    offset = 0
    for c in range(n_comp):
        nodes = np.flatnonzero(comp == c)
        share = max(1, int(round(n_regions * len(nodes) / n)))
        sub = _spectral_regions(adjacency[np.ix_(nodes, nodes)], min(share, len(nodes)), seed)
        labels[nodes] = sub + offset
        offset += sub.max() + 1
    return labels


def generate_cm(
    graph: SensorGraph,
    n_steps: int,
    n_channels: int,
    rate: float,
    seed: int,
    patch: int = 3,
    n_regions: int | None = None,
) -> np.ndarray:
    """Continuous missing: drop whole (3-step patch x graph region) blocks.

    Blocks are taken in random order until the dropped-cell fraction reaches
    ``rate``; the overshoot is at most one block.
    """
    _check_rate(rate)
    mask = np.ones((n_steps, graph.n_nodes, n_channels), dtype=bool)
    if rate == 0:
        return mask
    rng = np.random.default_rng(seed)
    regions = graph_regions(graph, n_regions, seed)
    region_ids = np.unique(regions)
    n_patches = -(-n_steps // patch)
    blocks = [(p, r) for p in range(n_patches) for r in region_ids]
    order = rng.permutation(len(blocks))
    target = rate * mask.size
    dropped = 0
    for b in order:
        if dropped >= target:
            break
        p, r = blocks[b]
        rows = slice(p * patch, min((p + 1) * patch, n_steps))
        nodes = regions == r
        mask[rows, nodes, :] = False
        dropped += (rows.stop - rows.start) * int(nodes.sum()) * n_channels
    return mask


def condition_missing(mask_in: np.ndarray, ratio_range: tuple[float, float], seed) -> tuple[np.ndarray, np.ndarray]:
    """Hide a random fraction of the observed entries of one sample.

    Returns ``(model_mask, eval_mask)``: what the model sees and which hidden
    entries are scored.  The fraction is drawn uniformly from ``ratio_range``.
    """
    if not np.any(mask_in):
        raise ValidationError("condition missing needs at least one observed entry")
    model_mask, eval_mask = condition_missing_batch(np.asarray(mask_in)[None], ratio_range, seed)
    return model_mask[0], eval_mask[0]


def condition_missing_batch(
    mask_in: np.ndarray, ratio_range: tuple[float, float], rng
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`condition_missing` with an independent ratio per leading-axis sample."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValidationError(f"ratio range must satisfy 0 <= lo <= hi <= 1, got {ratio_range}")
    mask_in = np.asarray(mask_in, dtype=bool)
    b = mask_in.shape[0]
    flat = mask_in.reshape(b, -1)
    ratios = rng.uniform(lo, hi, size=b)
    n_hide = np.rint(ratios * flat.sum(axis=1)).astype(np.int64)
    scores = rng.random(flat.shape)
    scores[~flat] = np.inf
    ranks = np.argsort(np.argsort(scores, axis=1, kind="stable"), axis=1, kind="stable")
    hide = (ranks < n_hide[:, None]) & flat
    model_mask = flat & ~hide
    return model_mask.reshape(mask_in.shape), hide.reshape(mask_in.shape)


def is_block_closed(mask: np.ndarray, regions: np.ndarray, patch: int = 3) -> bool:
    """True when every missing cell sits in a fully-missing (patch x region) block."""
    missing = ~mask.astype(bool)
    for start in range(0, mask.shape[0], patch):
        rows = missing[start:start + patch]
        for r in np.unique(regions):
            block = rows[:, regions == r, :]
            if block.any() and not block.all():
                return False
    return True


def save_mask(directory: str | Path, mask: np.ndarray, pattern: str, rate: float, seed: int, **extra) -> Path:
    """Persist as packed bits (``mask.npz``) plus a JSON sidecar (``mask.json``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mask = np.asarray(mask, dtype=bool)
    np.savez_compressed(directory / "mask.npz", bits=np.packbits(mask.ravel()), shape=np.asarray(mask.shape))
    meta = {
        "pattern": pattern,
        "rate": rate,
        "seed": seed,
        "shape": list(mask.shape),
        "missing_fraction": float(1.0 - mask.mean()) if mask.size else 0.0,
        **extra,
    }
    (directory / "mask.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory / "mask.npz"


def load_mask(directory: str | Path) -> tuple[np.ndarray, dict]:
    directory = Path(directory)
    with np.load(directory / "mask.npz") as archive:
        shape = tuple(int(s) for s in archive["shape"])
        bits = np.unpackbits(archive["bits"], count=int(np.prod(shape)))
    meta = json.loads((directory / "mask.json").read_text())
    return bits.reshape(shape).astype(bool), meta
