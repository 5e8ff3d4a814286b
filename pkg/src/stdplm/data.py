"""Dataset ingestion, normalization, temporal splits and sliding windows."""
from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .spectral import SensorGraph, adjacency_from_edges, time_indices

log = logging.getLogger(__name__)

# first sample of each public PEMS release; used when a file carries no timestamps
KNOWN_STARTS = {
    "PEMS03": "2018-09-01",
    "PEMS04": "2018-01-01",
    "PEMS07": "2017-05-01",
    "PEMS08": "2016-07-01",
}
DEFAULT_START = "2018-01-01"  # a Monday


@dataclass
class SpatialTemporalDataset:
    data: np.ndarray  # (T, N, C) float, NaN-free (missing entries hold 0)
    timestamps: np.ndarray  # (T,) int64 epoch seconds, naive calendar time
    graph: SensorGraph
    name: str = ""
    interval_seconds: int = 300
    observed: np.ndarray | None = None  # (T, N, C) bool; None means fully observed

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"data must be (T, N, C), got {self.data.shape}")
        if self.data.shape[1] != self.graph.n_nodes:
            raise ShapeError(f"data has {self.data.shape[1]} nodes, graph has {self.graph.n_nodes}")
        if self.timestamps.shape != (self.data.shape[0],):
            raise ShapeError(f"{len(self.timestamps)} timestamps for {self.data.shape[0]} samples")
        steps = np.diff(self.timestamps)
        if steps.size and np.any(steps != self.interval_seconds):
            raise ValidationError(f"timestamps must increase by exactly {self.interval_seconds}s")
        if self.observed is None:
            self.observed = np.ones(self.data.shape, dtype=bool)

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


def synthesize_timestamps(n_steps: int, interval_seconds: int = 300, start: str | None = None) -> np.ndarray:
    day = dt.datetime.fromisoformat(start or DEFAULT_START).replace(tzinfo=dt.timezone.utc)
    t0 = int(day.timestamp())
    t0 -= t0 % interval_seconds
    return t0 + interval_seconds * np.arange(n_steps, dtype=np.int64)


def read_edges(path: str | Path, id_map: dict[int, int] | None = None) -> list[tuple[int, int, float]]:
    """Read a ``from,to,cost`` CSV edge list."""
    edges = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"from", "to", "cost"} <= {f.strip() for f in reader.fieldnames}:
            raise ValidationError(f"{path}: expected header 'from,to,cost', got {reader.fieldnames}")
        for row in reader:
            row = {k.strip(): v for k, v in row.items()}
            src, dst = int(float(row["from"])), int(float(row["to"]))
            if id_map is not None:
                src, dst = id_map[src], id_map[dst]
            edges.append((src, dst, float(row["cost"])))
    return edges


def load_graph(
    adjacency_path: str | Path, n_nodes: int, binarize: bool = True, id_map_path: str | Path | None = None
) -> SensorGraph:
    id_map = None
    if id_map_path is not None:
        ids = [int(line) for line in Path(id_map_path).read_text().split()]
        id_map = {sensor: i for i, sensor in enumerate(ids)}
    edges = read_edges(adjacency_path, id_map)
    for src, dst, _ in edges:
        if src >= n_nodes or dst >= n_nodes or src < 0 or dst < 0:
            raise ValidationError(f"edge ({src}, {dst}) references a node outside [0, {n_nodes})")
    return SensorGraph(n_nodes, edges, adjacency_from_edges(n_nodes, edges, binarize=binarize))


def load_pems(
    data_path: str | Path,
    adjacency_path: str | Path,
    name: str | None = None,
    channels: Sequence[int] | None = (0,),
    binarize: bool = True,
    start: str | None = None,
    interval_seconds: int = 300,
    id_map_path: str | Path | None = None,
) -> SpatialTemporalDataset:
    """Load a PEMS-style ``.npz`` (array under ``data``) and its ``from,to,cost`` edge list.

    NaN entries are treated as unobserved.  An optional ``timestamps`` array in
    the archive is used as is; otherwise timestamps are synthesized from the
    dataset's known start date.
    """
    data_path = Path(data_path)
    name = name or data_path.stem
    try:
        with np.load(data_path, allow_pickle=False) as archive:
            key = "data" if "data" in archive.files else archive.files[0]
            raw = np.asarray(archive[key])
            stamps = np.asarray(archive["timestamps"], dtype=np.int64) if "timestamps" in archive.files else None
    except ValueError as exc:
        raise ValidationError(f"{data_path}: not a rectangular numeric array ({exc})") from exc
    if raw.dtype == object or not np.issubdtype(raw.dtype, np.number):
        raise ValidationError(f"{data_path}: expected a numeric array, got dtype {raw.dtype}")
    if raw.ndim == 2:
        raw = raw[..., None]
    if raw.ndim != 3:
        raise ValidationError(f"{data_path}: expected a (T, N, C) array, got shape {raw.shape}")
    if channels is not None:
        raw = raw[..., list(channels)]
    raw = raw.astype(np.float64)
    observed = np.isfinite(raw)
    data = np.where(observed, raw, 0.0)
    graph = load_graph(adjacency_path, raw.shape[1], binarize, id_map_path)
    if stamps is None:
        stamps = synthesize_timestamps(raw.shape[0], interval_seconds, start or KNOWN_STARTS.get(name.upper()))
    log.info("loaded %s: T=%d N=%d C=%d edges=%d", name, *raw.shape, graph.n_edges)
    return SpatialTemporalDataset(data, stamps, graph, name, interval_seconds, observed)


def save_dataset(dataset: SpatialTemporalDataset, directory: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.npz`` and ``<name>.csv`` in the layout :func:`load_pems` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = dataset.name or "dataset"
    data = np.where(dataset.observed, dataset.data, np.nan)
    data_path, adj_path = directory / f"{name}.npz", directory / f"{name}.csv"
    np.savez_compressed(data_path, data=data, timestamps=dataset.timestamps)
    with open(adj_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "cost"])
        for src, dst, w in dataset.graph.edges:
            writer.writerow([src, dst, w])
    return data_path, adj_path


@dataclass(frozen=True)
class SplitRanges:
    train: range
    val: range
    test: range

    def __iter__(self) -> Iterator[range]:
        return iter((self.train, self.val, self.test))


def split_6_2_2(n_steps: int, window: int = 24) -> SplitRanges:
    """Contiguous 60/20/20 split by floor division; the remainder goes to test."""
    if n_steps < 3 * window:
        raise ValidationError(f"{n_steps} steps is too short for a 6:2:2 split with window {window}")
    n_train = n_steps * 6 // 10
    n_val = n_steps * 2 // 10
    return SplitRanges(range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n_steps))


@dataclass
class NormalizationStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    @classmethod
    def fit(cls, data: np.ndarray, observed: np.ndarray, rows: range) -> "NormalizationStats":
        """Per-channel z-score statistics over observed entries of ``rows`` only."""
        x, m = data[rows.start:rows.stop], observed[rows.start:rows.stop]
        means, stds = [], []
        for c in range(data.shape[-1]):
            vals = x[..., c][m[..., c]]
            if vals.size == 0:
                raise ValidationError(f"channel {c} has no observed training entries")
            means.append(vals.mean())
            stds.append(vals.std())
        std = np.asarray(stds)
        std[std < 1e-8] = 1.0  # constant channel; keeps the z-score defined
        return cls(np.asarray(means), std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, values: dict) -> "NormalizationStats":
        return cls(np.asarray(values["mean"], dtype=np.float64), np.asarray(values["std"], dtype=np.float64))


@dataclass
class WindowSample:
    x_in: np.ndarray  # (T_in, N, C) normalized, zeros where mask_in == 0
    mask_in: np.ndarray  # (T_in, N, C)
    target: np.ndarray  # (T_out, N, C) normalized
    eval_mask: np.ndarray  # (T_out, N, C)
    timestamps_in: np.ndarray  # (T_in,)


@dataclass
class WindowSet:
    """Stride-1 windows over one split, materialized lazily.

    ``values`` are normalized; ``observed`` marks ground truth that exists;
    ``available`` marks what the model may see (observed minus injected
    missingness).  For forecasting the target is the following ``t_out``
    steps; for imputation it is the input window itself, scored where data
    is observed but hidden.
    """

    values: np.ndarray
    observed: np.ndarray
    available: np.ndarray
    tod: np.ndarray
    dow: np.ndarray
    timestamps: np.ndarray
    starts: np.ndarray
    task: str
    t_in: int = 12
    t_out: int = 12
    _offsets_in: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._offsets_in = np.arange(self.t_in)

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> WindowSample:
        b = self.batch(np.array([i]))
        return WindowSample(b["x"][0], b["mask"][0], b["target"][0], b["eval_mask"][0], b["timestamps"][0])

    def subset(self, count: int) -> "WindowSet":
        """The chronologically first ``count`` windows."""
        return WindowSet(self.values, self.observed, self.available, self.tod, self.dow, self.timestamps,
                         self.starts[:count], self.task, self.t_in, self.t_out)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        starts = self.starts[np.asarray(idx)]
        rows_in = starts[:, None] + self._offsets_in
        mask = self.available[rows_in]
        x = np.where(mask, self.values[rows_in], 0.0)
        if self.task == "forecast":
            rows_out = starts[:, None] + self.t_in + np.arange(self.t_out)
            target = self.values[rows_out]
            eval_mask = self.observed[rows_out]
        else:
            target = self.values[rows_in]
            eval_mask = self.observed[rows_in] & ~mask
        return {
            "x": x,
            "mask": mask,
            "target": target,
            "eval_mask": eval_mask,
            "observed": self.observed[rows_in],
            "tod": self.tod[rows_in],
            "dow": self.dow[rows_in],
            "timestamps": self.timestamps[rows_in],
        }


def make_windows(
    values: np.ndarray,
    timestamps: np.ndarray,
    rows: range,
    task: str,
    observed: np.ndarray | None = None,
    available: np.ndarray | None = None,
    t_in: int = 12,
    t_out: int = 12,
    interval_seconds: int = 300,
) -> WindowSet:
    """All stride-1 windows lying entirely inside ``rows``."""
    if task not in ("forecast", "impute"):
        raise ValidationError(f"unknown task {task!r}")
    observed = np.ones(values.shape, dtype=bool) if observed is None else observed.astype(bool)
    available = observed if available is None else (available.astype(bool) & observed)
    span = t_in + t_out if task == "forecast" else t_in
    count = max(0, len(rows) - span + 1)
    starts = np.arange(rows.start, rows.start + count, dtype=np.int64)
    tod, dow = time_indices(timestamps, interval_seconds)
    return WindowSet(values, observed, available, tod, dow, np.asarray(timestamps), starts, task, t_in, t_out)


def few_shot_count(n_windows: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    count = int(np.floor(ratio * n_windows + 1e-9))
    if count < 1:
        raise ValidationError(f"ratio {ratio} of {n_windows} training windows leaves no samples")
    return count
