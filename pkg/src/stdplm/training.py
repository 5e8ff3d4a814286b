"""Training loop, evaluation, few-shot / zero-shot harnesses and run directories.

Run directory layout::

    config.json              experiment config snapshot
    checkpoint.safetensors   every named parameter and buffer (incl. spectral basis)
    checkpoint.json          manifest: config, normalization stats, seed, best epoch
    metrics.json             test MAE/RMSE/MAPE (mean over seeds) + per-seed arrays
    history.json             per-epoch train loss and validation metrics, per seed
    params.json              parameter counts and wall-clock
    predictions.npz          first-step test predictions/targets, for plotting
    masks/                   injected missing pattern (imputation runs)
    plots/                   written by ``report``
"""
from __future__ import annotations

import copy
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import ExperimentConfig
from .data import (
    NormalizationStats,
    SpatialTemporalDataset,
    WindowSet,
    few_shot_count,
    load_pems,
    make_windows,
    split_6_2_2,
)
from .errors import ConfigError, RunLockedError, TrainingDivergedError, ValidationError
from .losses import total_loss
from .masks import condition_missing_batch, generate_cm, generate_rm, save_mask
from .metrics import MetricAccumulator
from .model import StdPlmModel, model_from_state

log = logging.getLogger(__name__)

ModelFactory = Callable[[ExperimentConfig, "SpatialTemporalDataset"], torch.nn.Module]


@dataclass
class PreparedData:
    dataset: SpatialTemporalDataset
    stats: NormalizationStats
    train: WindowSet
    val: WindowSet
    test: WindowSet
    pattern: np.ndarray | None = None  # injected missingness, 1 = kept


@dataclass
class RunArtifacts:
    run_dir: Path | None
    checkpoint: Path | None
    test_metrics: dict
    history: list[dict]
    config: ExperimentConfig
    report: dict = field(default_factory=dict)
    model: torch.nn.Module | None = None
    stats: NormalizationStats | None = None


def load_dataset(config: ExperimentConfig) -> SpatialTemporalDataset:
    d = config.data
    if not d.data_path or not d.adjacency_path:
        raise ConfigError("data.data_path and data.adjacency_path are required")
    return load_pems(
        d.data_path,
        d.adjacency_path,
        name=d.name or None,
        channels=list(d.channels) if d.channels else None,
        binarize=d.binarize_adjacency,
        start=d.start,
        interval_seconds=config.model.interval_seconds,
    )


def missing_pattern(config: ExperimentConfig, dataset: SpatialTemporalDataset) -> np.ndarray | None:
    m = config.missing
    if config.task != "impute" or m.pattern == "none":
        return None
    if m.pattern == "rm":
        return generate_rm(dataset.data.shape, m.rate, m.seed)
    return generate_cm(dataset.graph, dataset.n_steps, dataset.n_channels, m.rate, m.seed)


def prepare(
    config: ExperimentConfig,
    dataset: SpatialTemporalDataset | None = None,
    stats: NormalizationStats | None = None,
) -> PreparedData:
    dataset = dataset if dataset is not None else load_dataset(config)
    mc = config.model
    if dataset.n_channels != mc.channels:
        raise ConfigError(f"dataset has {dataset.n_channels} channels, model expects {mc.channels}")
    forecast = config.task == "forecast"
    if not forecast and config.missing.pattern == "none":
        raise ConfigError("imputation is scored on injected missingness: set missing.pattern to 'rm' or 'cm'")
    window = mc.t_in + mc.t_out if forecast else mc.t_in
    splits = split_6_2_2(dataset.n_steps, window)
    stats = stats or NormalizationStats.fit(dataset.data, dataset.observed, splits.train)
    values = np.where(dataset.observed, stats.normalize(dataset.data), 0.0)
    pattern = missing_pattern(config, dataset)

    def windows(rows: range, stride: int = 1) -> WindowSet:
        ws = make_windows(values, dataset.timestamps, rows, config.task, dataset.observed, pattern,
                          mc.t_in, mc.t_out, mc.interval_seconds)
        if stride > 1:
            ws.starts = ws.starts[::stride]
        return ws

    # imputation scores every hidden cell once: non-overlapping evaluation windows
    eval_stride = 1 if forecast else mc.t_in
    train = windows(splits.train)
    if config.train.few_shot_ratio is not None:
        train = train.subset(few_shot_count(len(train), config.train.few_shot_ratio))
    return PreparedData(dataset, stats, train, windows(splits.val, eval_stride), windows(splits.test, eval_stride), pattern)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _tensors(batch: dict, device, dtype) -> dict[str, torch.Tensor]:
    out = {}
    for key in ("x", "mask", "target", "eval_mask"):
        out[key] = torch.as_tensor(batch[key], dtype=dtype, device=device)
    for key in ("tod", "dow"):
        out[key] = torch.as_tensor(batch[key], dtype=torch.long, device=device)
    return out


def _model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _model_device(model: torch.nn.Module) -> torch.device:
    return next(model.parameters()).device


@torch.no_grad()
def evaluate_windows(
    model: StdPlmModel,
    windows: WindowSet,
    stats: NormalizationStats,
    batch_size: int = 128,
    keep_predictions: bool = False,
) -> dict:
    """De-normalized MAE/RMSE/MAPE over the windows' evaluation positions."""
    if len(windows) == 0:
        raise ValidationError("no evaluation windows: split too short")
    model.eval()
    device, dtype = _model_device(model), _model_dtype(model)
    acc = MetricAccumulator()
    first_pred, first_true, first_mask = [], [], []
    for lo in range(0, len(windows), batch_size):
        b = windows.batch(np.arange(lo, min(lo + batch_size, len(windows))))
        t = _tensors(b, device, dtype)
        out = model(t["x"], t["mask"], t["tod"], t["dow"])
        pred = stats.denormalize(model.unflatten(out.y).double().cpu().numpy())
        truth = stats.denormalize(b["target"])
        acc.update(pred, truth, b["eval_mask"])
        if keep_predictions:
            first_pred.append(pred[:, 0])
            first_true.append(truth[:, 0])
            first_mask.append(b["eval_mask"][:, 0])
    result = acc.result()
    if keep_predictions:
        result["_predictions"] = {
            "prediction": np.concatenate(first_pred).astype(np.float32),
            "target": np.concatenate(first_true).astype(np.float32),
            "eval_mask": np.concatenate(first_mask),
        }
    return result


def baseline_metrics(windows: WindowSet, stats: NormalizationStats, kind: str, node_means: np.ndarray | None = None) -> dict:
    """Copy-last-observation (forecasting) or per-node mean (imputation) baselines."""
    acc = MetricAccumulator()
    for lo in range(0, len(windows), 256):
        b = windows.batch(np.arange(lo, min(lo + 256, len(windows))))
        truth = stats.denormalize(b["target"])
        if kind == "copy_last":
            last = stats.denormalize(b["x"][:, -1:])
            pred = np.repeat(last, truth.shape[1], axis=1)
        elif kind == "node_mean":
            pred = np.broadcast_to(node_means, truth.shape)
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        acc.update(pred, truth, b["eval_mask"])
    return acc.result()


def train_model(
    model: StdPlmModel,
    prepared: PreparedData,
    config: ExperimentConfig,
    seed: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[list[dict], dict]:
    """Fit ``model`` in place; returns (history, best-epoch summary). Best weights are restored."""
    tc = config.train
    device, dtype = _model_device(model), _model_dtype(model)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay) if params else None
    rng = np.random.default_rng(seed)
    impute = config.task == "impute"
    n_train = len(prepared.train)
    if n_train == 0:
        raise ValidationError("no training windows")

    history: list[dict] = []
    best = {"val_mae": float("inf"), "epoch": 0}
    best_state = copy.deepcopy(model.state_dict())
    wait = 0
    for epoch in range(1, tc.epochs + 1):
        started = time.perf_counter()
        model.train()
        order = rng.permutation(n_train)
        sums = {"total": 0.0, "l1": 0.0, "l_g": 0.0, "l_r": 0.0}
        n_batches = 0
        for lo in range(0, n_train, tc.batch_size):
            b = prepared.train.batch(order[lo:lo + tc.batch_size])
            if impute:
                model_mask, hidden = condition_missing_batch(b["mask"], config.missing.condition_ratio, rng)
                keep = hidden.reshape(len(hidden), -1).any(axis=1)
                if not keep.any():
                    continue
                b = {k: v[keep] for k, v in b.items()}
                b["x"] = np.where(model_mask[keep], b["x"], 0.0)
                b["mask"], b["eval_mask"] = model_mask[keep], hidden[keep]
            t = _tensors(b, device, dtype)
            out = model(t["x"], t["mask"], t["tod"], t["dow"])
            y = model.unflatten(out.y)
            try:
                losses = total_loss(y, t["target"], t["eval_mask"], out.attention,
                                    model.constraint_adjacency, model.dirichlet_alpha, tc.lambda_c)
            except ArithmeticError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {exc}; "
                    f"input finite={bool(torch.isfinite(t['x']).all())}, "
                    f"output finite={bool(torch.isfinite(out.y).all())}"
                ) from exc
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                optimizer.step()
            for key, value in losses.as_floats().items():
                if key in sums:
                    sums[key] += value
            n_batches += 1
        val = evaluate_windows(model, prepared.val, prepared.stats, tc.eval_batch_size)
        record = {"epoch": epoch, **{f"train_{k}": v / max(n_batches, 1) for k, v in sums.items()},
                  **{f"val_{k}": v for k, v in val.items()}, "seconds": time.perf_counter() - started}
        history.append(record)
        if on_epoch:
            on_epoch(record)
        log.debug("epoch %d train %.4f val mae %.4f", epoch, record["train_total"], val["mae"])
        if val["mae"] < best["val_mae"]:
            best = {"val_mae": val["mae"], "epoch": epoch}
            best_state = copy.deepcopy(model.state_dict())
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                break
    model.load_state_dict(best_state)
    best["epochs_run"] = len(history)
    return history, best


def build_model(config: ExperimentConfig, dataset: SpatialTemporalDataset) -> StdPlmModel:
    model = StdPlmModel(config.model, dataset.graph)
    return model.to(config.train.device)


# ---------------------------------------------------------------------------
# checkpoints and run directories


def save_checkpoint(path_stem: Path, model: StdPlmModel, config: ExperimentConfig, stats: NormalizationStats, **meta) -> Path:
    from safetensors.torch import save_file

    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    weights = path_stem.with_suffix(".safetensors")
    manifest = {
        "format": "stdplm-checkpoint",
        "version": 1,
        "config": config.to_dict(),
        "normalization": stats.to_dict(),
        "tensors": sorted(tensors),
        **meta,
    }
    try:
        save_file(tensors, str(weights))
        path_stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {weights}: {exc}") from exc
    return weights


def load_checkpoint(run_dir: str | Path) -> tuple[StdPlmModel, ExperimentConfig, NormalizationStats, dict]:
    from safetensors.torch import load_file

    from .config import from_dict

    run_dir = Path(run_dir)
    stem = run_dir / "checkpoint" if run_dir.is_dir() else run_dir.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    config = from_dict(manifest["config"])
    state = load_file(str(stem.with_suffix(".safetensors")))
    model = model_from_state(config.model, state).to(config.train.device)
    return model, config, NormalizationStats.from_dict(manifest["normalization"]), manifest


@contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockedError(f"{run_dir} is locked by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _summarize(per_seed: list[dict]) -> dict:
    out: dict = {}
    for key in ("mae", "rmse", "mape"):
        vals = np.array([m[key] for m in per_seed], dtype=np.float64)
        out[key] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    out["per_seed"] = {key: [m[key] for m in per_seed] for key in ("mae", "rmse", "mape")}
    return out


def train(
    config: ExperimentConfig,
    run_dir: str | Path | None = None,
    dataset: SpatialTemporalDataset | None = None,
    model_factory: ModelFactory | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> RunArtifacts:
    """Train one model per seed; keep the checkpoint with the best validation MAE."""
    prepared = prepare(config, dataset)
    factory = model_factory or build_model
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_lock(run_dir) if run_dir is not None else _null_context()
    with lock:
        if run_dir is not None:
            config.save(run_dir / "config.json")
            if prepared.pattern is not None:
                save_mask(run_dir / "masks", prepared.pattern, config.missing.pattern,
                          config.missing.rate, config.missing.seed)
        started = time.perf_counter()
        per_seed, histories, best_overall = [], {}, None
        for seed in config.train.seeds:
            seed_everything(seed)
            model = factory(config, prepared.dataset)
            history, best = train_model(model, prepared, config, seed, on_epoch)
            test = evaluate_windows(model, prepared.test, prepared.stats, config.train.eval_batch_size,
                                    keep_predictions=True)
            predictions = test.pop("_predictions")
            per_seed.append(test)
            histories[str(seed)] = history
            if best_overall is None or best["val_mae"] < best_overall[1]["val_mae"]:
                best_overall = (seed, best, model, predictions, test)
        seed, best, model, predictions, test = best_overall
        metrics = _summarize(per_seed)
        metrics["best_seed"] = seed
        report = {**model.parameter_report(), "wall_clock_seconds": time.perf_counter() - started,
                  "best_epoch": best["epoch"], "epochs_run": best["epochs_run"]}
        checkpoint = None
        if run_dir is not None:
            checkpoint = save_checkpoint(run_dir / "checkpoint", model, config, prepared.stats,
                                         seed=seed, best_epoch=best["epoch"], val_mae=best["val_mae"],
                                         test_metrics=test)
            (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
            (run_dir / "history.json").write_text(json.dumps(histories, indent=2) + "\n")
            (run_dir / "params.json").write_text(json.dumps(report, indent=2) + "\n")
            np.savez_compressed(run_dir / "predictions.npz", **predictions)
    return RunArtifacts(run_dir, checkpoint, metrics, histories[str(seed)], config, report, model, prepared.stats)


@contextmanager
def _null_context():
    yield


def evaluate(run_dir: str | Path, dataset: SpatialTemporalDataset | None = None, task: str | None = None) -> dict:
    """Test-split metrics of a saved run, using the run's normalization statistics."""
    model, config, stats, _ = load_checkpoint(run_dir)
    if task is not None and task != config.task:
        config = replace(config, task=task)
    dataset = dataset if dataset is not None else load_dataset(config)
    if dataset.n_nodes != model.n_nodes or not np.array_equal(dataset.graph.adjacency, model.graph.adjacency):
        model.set_graph(dataset.graph)
    prepared = prepare(config, dataset, stats)
    return evaluate_windows(model, prepared.test, stats, config.train.eval_batch_size)


def few_shot(config: ExperimentConfig, ratio: float, run_dir: str | Path | None = None, **kwargs) -> RunArtifacts:
    """Train on the chronologically first ``ratio`` of training windows."""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    config = replace(config, train=replace(config.train, few_shot_ratio=ratio))
    return train(config, run_dir, **kwargs)


def zero_shot(
    run_dir: str | Path, target: SpatialTemporalDataset, out_dir: str | Path | None = None
) -> dict:
    """Apply a trained run to another graph/dataset with no weight updates.

    The spectral basis is rebuilt for the target graph; normalization
    statistics come from the target's own training split.
    """
    model, config, _, _ = load_checkpoint(run_dir)
    if target.n_channels != config.model.channels:
        raise ConfigError(f"target has {target.n_channels} channels, model expects {config.model.channels}")
    model.set_graph(target.graph)
    prepared = prepare(config, target)
    metrics = evaluate_windows(model, prepared.test, prepared.stats, config.train.eval_batch_size)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {**metrics, "source_run": str(run_dir), "target": target.name, "n_nodes": target.n_nodes}
        (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    return metrics


@torch.no_grad()
def predict(run_dir: str | Path, dataset: SpatialTemporalDataset | None = None, task: str | None = None) -> dict:
    """Full-horizon de-normalized test predictions of a saved run.

    Returns arrays ``prediction``, ``target``, ``eval_mask`` of shape
    (windows, T_out, N, C), the input ``timestamps`` and the ``metrics``.
    """
    model, config, stats, _ = load_checkpoint(run_dir)
    if task is not None and task != config.task:
        config = replace(config, task=task)
    dataset = dataset if dataset is not None else load_dataset(config)
    if dataset.n_nodes != model.n_nodes or not np.array_equal(dataset.graph.adjacency, model.graph.adjacency):
        model.set_graph(dataset.graph)
    windows = prepare(config, dataset, stats).test
    if len(windows) == 0:
        raise ValidationError("no test windows: split too short")
    model.eval()
    device, dtype = _model_device(model), _model_dtype(model)
    preds, truths, masks, stamps = [], [], [], []
    acc = MetricAccumulator()
    bs = config.train.eval_batch_size
    for lo in range(0, len(windows), bs):
        b = windows.batch(np.arange(lo, min(lo + bs, len(windows))))
        t = _tensors(b, device, dtype)
        out = model(t["x"], t["mask"], t["tod"], t["dow"])
        pred = stats.denormalize(model.unflatten(out.y).double().cpu().numpy())
        truth = stats.denormalize(b["target"])
        acc.update(pred, truth, b["eval_mask"])
        preds.append(pred.astype(np.float32))
        truths.append(truth.astype(np.float32))
        masks.append(b["eval_mask"])
        stamps.append(b["timestamps"])
    return {
        "prediction": np.concatenate(preds),
        "target": np.concatenate(truths),
        "eval_mask": np.concatenate(masks),
        "timestamps": np.concatenate(stamps),
        "metrics": acc.result(),
    }
