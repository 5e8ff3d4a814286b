"""Metric tables and static plots for a finished run directory."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def metric_table(metrics: dict) -> str:
    rows = ["| metric | mean | std |", "|---|---|---|"]
    for key in ("mae", "rmse", "mape"):
        if key in metrics:
            std = metrics.get(f"{key}_std", 0.0)
            rows.append(f"| {key.upper()} | {metrics[key]:.4f} | {std:.4f} |")
    return "\n".join(rows)


def parameter_table(params: dict) -> str:
    rows = ["| total | trainable | ratio (%) |", "|---|---|---|"]
    rows.append(f"| {params['parameters']:,} | {params['trainable_parameters']:,} | "
                f"{params['trainable_ratio_percent']:.2f} |")
    return "\n".join(rows)


def write_report(run_dir: str | Path, node: int = 0, max_points: int = 576) -> list[Path]:
    """Write ``plots/report.md``, ``plots/loss.png`` and ``plots/prediction.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    written = []

    metrics = json.loads((run_dir / "metrics.json").read_text())
    sections = [f"# {run_dir.name}", "", "## Test metrics", "", metric_table(metrics)]
    if (run_dir / "params.json").exists():
        params = json.loads((run_dir / "params.json").read_text())
        sections += ["", "## Parameters", "", parameter_table(params)]
    (plots / "report.md").write_text("\n".join(sections) + "\n")
    written.append(plots / "report.md")

    if (run_dir / "history.json").exists():
        histories = json.loads((run_dir / "history.json").read_text())
        fig, ax = plt.subplots(figsize=(7, 4))
        for seed, history in histories.items():
            epochs = [r["epoch"] for r in history]
            ax.plot(epochs, [r["train_l1"] for r in history], label=f"train L1 (seed {seed})")
            ax.plot(epochs, [r["val_mae"] for r in history], "--", label=f"val MAE (seed {seed})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plots / "loss.png", dpi=120)
        plt.close(fig)
        written.append(plots / "loss.png")

    if (run_dir / "predictions.npz").exists():
        with np.load(run_dir / "predictions.npz") as archive:
            pred, truth, mask = archive["prediction"], archive["target"], archive["eval_mask"]
        pred, truth, mask = pred[:max_points, node, 0], truth[:max_points, node, 0], mask[:max_points, node, 0]
        steps = np.arange(len(pred))
        fig, ax = plt.subplots(figsize=(9, 3.5))
        ax.plot(steps, truth, color="black", lw=1, label="truth")
        ax.plot(steps, pred, color="tab:red", lw=1, label="prediction")
        ax.scatter(steps[mask], pred[mask], s=4, color="tab:red")
        ax.set_xlabel("test window")
        ax.set_title(f"node {node}, first output step")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plots / "prediction.png", dpi=120)
        plt.close(fig)
        written.append(plots / "prediction.png")
    return written
