"""Small synthetic sensor networks: graph diffusion plus daily sinusoids."""
from __future__ import annotations

import numpy as np

from .data import SpatialTemporalDataset, synthesize_timestamps
from .spectral import SensorGraph, adjacency_from_edges, steps_per_day


def random_graph(n_nodes: int, edge_prob: float, seed: int) -> SensorGraph:
    """Connected random graph: a ring backbone plus Erdos-Renyi chords, one directed edge per pair."""
    rng = np.random.default_rng(seed)
    pairs = {(i, (i + 1) % n_nodes) for i in range(n_nodes)} if n_nodes > 2 else {(0, 1)} if n_nodes == 2 else set()
    for i in range(n_nodes):
        for j in range(i + 2, n_nodes):
            if rng.random() < edge_prob:
                pairs.add((i, j))
    edges = [(i, j, float(rng.uniform(0.5, 5.0))) for i, j in sorted(pairs) if i != j]
    return SensorGraph(n_nodes, edges, adjacency_from_edges(n_nodes, edges, binarize=True))


def diffusion_sinusoid(
    n_nodes: int = 20,
    n_steps: int = 2000,
    channels: int = 1,
    seed: int = 0,
    edge_prob: float = 0.15,
    interval_seconds: int = 300,
    noise: float = 0.05,
    name: str = "synthetic",
    phase_spread: float | None = 0.5,
) -> SpatialTemporalDataset:
    """Node signals = level + daily and sub-daily sinusoids + a diffusing latent AR(1) field.

    Sinusoid phases share a common cycle with per-node jitter of
    ``phase_spread`` radians (std); ``None`` draws every node's phase
    uniformly, leaving no cross-node periodic structure.
    """
    rng = np.random.default_rng(seed + 1)
    graph = random_graph(n_nodes, edge_prob, seed)
    sym = graph.symmetrized()
    deg = sym.sum(axis=1, keepdims=True)
    walk = np.where(deg > 0, sym / np.maximum(deg, 1e-12), 0.0)
    diffuse = 0.5 * np.eye(n_nodes) + 0.5 * walk

    timestamps = synthesize_timestamps(n_steps, interval_seconds)
    per_day = steps_per_day(interval_seconds)
    phase = 2 * np.pi * ((timestamps // interval_seconds) % per_day) / per_day

    level = rng.uniform(3.0, 8.0, size=(n_nodes, channels))
    daily_amp = rng.uniform(1.0, 3.0, size=(n_nodes, channels))
    fast_amp = rng.uniform(0.5, 1.5, size=(n_nodes, channels))
    if phase_spread is None:
        daily_phase = rng.uniform(0, 2 * np.pi, size=(n_nodes, channels))
        fast_phase = rng.uniform(0, 2 * np.pi, size=(n_nodes, channels))
    else:
        daily_phase = rng.normal(0, phase_spread, size=(n_nodes, channels))
        fast_phase = rng.normal(0, phase_spread, size=(n_nodes, channels))

    latent = np.zeros((n_steps, n_nodes, channels))
    z = rng.normal(0, 0.3, size=(n_nodes, channels))
    for t in range(n_steps):
        z = 0.95 * diffuse @ z + rng.normal(0, 0.1, size=(n_nodes, channels))
        latent[t] = z

    p = phase[:, None, None]
    data = (
        level
        + daily_amp * np.sin(p + daily_phase)
        + fast_amp * np.sin(8 * p + fast_phase)
        + latent
        + rng.normal(0, noise, size=(n_steps, n_nodes, channels))
    )
    return SpatialTemporalDataset(data, timestamps, graph, name, interval_seconds)
