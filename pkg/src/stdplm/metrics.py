"""MAE / RMSE / MAPE over masked entries, in the units of the inputs."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

MAPE_EPSILON = 1e-4


def metrics(y, target, eval_mask, eps: float = MAPE_EPSILON) -> dict[str, float]:
    acc = MetricAccumulator(eps)
    acc.update(y, target, eval_mask)
    return acc.result()


class MetricAccumulator:
    """Exact streaming sums, so batched evaluation equals one-shot evaluation."""

    def __init__(self, eps: float = MAPE_EPSILON):
        self.eps = eps
        self.abs_sum = 0.0
        self.sq_sum = 0.0
        self.count = 0
        self.pct_sum = 0.0
        self.pct_count = 0

    def update(self, y, target, eval_mask) -> None:
        y, target = np.asarray(y, dtype=np.float64), np.asarray(target, dtype=np.float64)
        mask = np.asarray(eval_mask, dtype=bool)
        if y.shape != target.shape or y.shape != mask.shape:
            raise ShapeError(f"shapes differ: {y.shape}, {target.shape}, {mask.shape}")
        err = (y - target)[mask]
        truth = target[mask]
        self.abs_sum += float(np.abs(err).sum())
        self.sq_sum += float((err**2).sum())
        self.count += err.size
        keep = np.abs(truth) > self.eps
        self.pct_sum += float((np.abs(err[keep]) / np.abs(truth[keep])).sum())
        self.pct_count += int(keep.sum())

    def result(self) -> dict[str, float]:
        if self.count == 0:
            raise ValidationError("evaluation mask has no active entries")
        mape = 100.0 * self.pct_sum / self.pct_count if self.pct_count else float("nan")
        return {
            "mae": self.abs_sum / self.count,
            "rmse": float(np.sqrt(self.sq_sum / self.count)),
            "mape": mape,
        }
