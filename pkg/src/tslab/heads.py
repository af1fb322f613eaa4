"""Task heads, losses, thresholds, and metrics for the four task pipelines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

TASKS = ("forecast", "impute", "anomaly", "classify")
IMPUTE_RATIOS = (0.125, 0.25, 0.375, 0.5)


@dataclass
class TaskConfig:
    """Which task to run and its single task-specific knob.

    `horizon` / `mask_ratio` accept a single value or a list (per-horizon or
    per-ratio breakdown, one trained model per value).
    """

    task: str
    horizon: object = None
    mask_ratio: object = None
    anomaly_ratio: float | None = None
    n_classes: int | None = None
    point_adjust: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        required = {
            "forecast": "horizon",
            "impute": "mask_ratio",
            "anomaly": "anomaly_ratio",
            "classify": "n_classes",
        }[self.task]
        for name in ("horizon", "mask_ratio", "anomaly_ratio", "n_classes"):
            value = getattr(self, name)
            if name == required:
                if value is None:
                    raise ConfigurationError(f"task {self.task!r} requires {name}")
            elif value is not None:
                raise ConfigurationError(f"task {self.task!r} does not take {name}")
        if self.task == "forecast":
            self.horizon = tuple(int(h) for h in np.atleast_1d(self.horizon))
            if any(h < 1 for h in self.horizon):
                raise ConfigurationError("horizon must be >= 1")
        elif self.task == "impute":
            self.mask_ratio = tuple(float(r) for r in np.atleast_1d(self.mask_ratio))
            if any(not 0.0 < r < 1.0 for r in self.mask_ratio):
                raise ConfigurationError("mask ratio must lie in (0, 1)")
        elif self.task == "anomaly":
            self.anomaly_ratio = float(self.anomaly_ratio)
            if not 0.0 < self.anomaly_ratio < 100.0:
                raise ConfigurationError("anomaly_ratio is a percent in (0, 100)")
        else:
            self.n_classes = int(self.n_classes)
            if self.n_classes < 2:
                raise ConfigurationError("classification needs n_classes >= 2")

    @classmethod
    def parse(cls, value) -> "TaskConfig":
        if isinstance(value, TaskConfig):
            return value
        if isinstance(value, str):
            value = {"task": value}
        value = dict(value)
        return cls(
            task=str(value.get("task", "")),
            horizon=value.get("horizon"),
            mask_ratio=value.get("mask_ratio"),
            anomaly_ratio=value.get("anomaly_ratio"),
            n_classes=value.get("n_classes"),
            point_adjust=bool(value.get("point_adjust", True)),
        )


@dataclass
class MetricRecord:
    """Task metrics; serializes with a fixed key set.

    For imputation breakdowns the `horizon` slot carries the mask ratio.
    """

    task: str
    mse: float | None = None
    mae: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    accuracy: float | None = None
    horizon: float | None = None

    def __post_init__(self):
        for name in ("mse", "mae", "precision", "recall", "f1", "accuracy"):
            value = getattr(self, name)
            if value is None:
                continue
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"metric {name} must be finite and >= 0, got {value}")
            setattr(self, name, value)
        if self.f1 is not None and self.precision is not None and self.recall is not None:
            denom = self.precision + self.recall
            expected = 0.0 if denom == 0 else 2 * self.precision * self.recall / denom
            if abs(self.f1 - expected) > 1e-9:
                raise ConfigurationError(f"f1 {self.f1} inconsistent with precision/recall (expected {expected})")

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "mse": self.mse,
            "mae": self.mae,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "horizon": self.horizon,
        }


class ForecastHead(nn.Module):
    """Flatten a channel's S x D tokens and map linearly to N future values."""

    def __init__(self, n_tokens: int, width: int, horizon: int, gen: torch.Generator):
        super().__init__()
        self.proj = nn.Linear(n_tokens * width, horizon)
        bound = 1.0 / math.sqrt(self.proj.in_features)
        with torch.no_grad():
            self.proj.weight.uniform_(-bound, bound, generator=gen)
            self.proj.bias.zero_()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens.flatten(-2))


class ReconstructHead(ForecastHead):
    """Same linear readout shape, but the output length is the input length."""

    def __init__(self, n_tokens: int, width: int, length: int, gen: torch.Generator):
        super().__init__(n_tokens, width, length, gen)


class ClassifyHead(nn.Module):
    """Mean-pool tokens per channel, concatenate channels, map to C scores."""

    def __init__(self, width: int, n_channels: int, n_classes: int, gen: torch.Generator):
        super().__init__()
        if n_classes < 2:
            raise ConfigurationError("classification needs n_classes >= 2")
        self.proj = nn.Linear(width * n_channels, n_classes)
        bound = 1.0 / math.sqrt(self.proj.in_features)
        with torch.no_grad():
            self.proj.weight.uniform_(-bound, bound, generator=gen)
            self.proj.bias.zero_()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: B x V x S x D -> pool over S -> B x (V*D) -> B x C
        pooled = tokens.mean(dim=-2)
        return self.proj(pooled.flatten(-2))


def masked_mse(pred: torch.Tensor, target: torch.Tensor, observed_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over missing cells only (mask: 1 = observed)."""
    missing = 1.0 - observed_mask
    count = missing.sum()
    if float(count) == 0.0:
        return (pred * 0.0).sum()
    return ((pred - target) ** 2 * missing).sum() / count


def anomaly_threshold(train_errors, test_errors, r: float) -> float:
    """(100 - r)-th linear-interpolation percentile of combined error energies."""
    train_errors = np.asarray(train_errors, dtype=np.float64).ravel()
    test_errors = np.asarray(test_errors, dtype=np.float64).ravel()
    if train_errors.size == 0 or test_errors.size == 0:
        raise ConfigurationError("empty error sequences")
    if not 0.0 < r < 100.0:
        raise ConfigurationError("anomaly ratio r is a percent in (0, 100)")
    combined = np.concatenate([train_errors, test_errors])
    return float(np.percentile(combined, 100.0 - r, method="linear"))


def point_adjust_flags(flags: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Credit whole labeled segments when any point inside them is flagged."""
    flags = np.asarray(flags).astype(bool).copy()
    labels = np.asarray(labels).astype(bool)
    if flags.shape != labels.shape:
        raise ConfigurationError(f"flags shape {flags.shape} != labels shape {labels.shape}")
    n = len(labels)
    t = 0
    while t < n:
        if labels[t]:
            start = t
            while t < n and labels[t]:
                t += 1
            if flags[start:t].any():
                flags[start:t] = True
        else:
            t += 1
    return flags


def precision_recall_f1(flags: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    flags = np.asarray(flags).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = float(np.sum(flags & labels))
    fp = float(np.sum(flags & ~labels))
    fn = float(np.sum(~flags & labels))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def evaluate(predictions, targets, task, mask=None, point_adjust: bool | None = None, horizon=None) -> MetricRecord:
    """Compute the task's MetricRecord from aligned predictions and targets.

    forecast/impute: regression metrics (impute restricted to missing cells when
    a mask is given).  anomaly: predictions are binary flags, targets are point
    labels.  classify: predictions are score matrices or class ids.
    """
    task_name = task.task if isinstance(task, TaskConfig) else str(task)
    if task_name not in TASKS:
        raise ConfigurationError(f"unknown task {task_name!r}")
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)

    if task_name in ("forecast", "impute"):
        if predictions.shape != targets.shape:
            raise ConfigurationError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
        diff = predictions.astype(np.float64) - targets.astype(np.float64)
        if task_name == "impute" and mask is not None:
            mask = np.asarray(mask)
            if mask.shape != predictions.shape:
                raise ConfigurationError(f"mask shape {mask.shape} != prediction shape {predictions.shape}")
            missing = mask == 0
            if not missing.any():
                raise ConfigurationError("imputation evaluation needs at least one missing cell")
            diff = diff[missing]
        return MetricRecord(
            task=task_name,
            mse=float(np.mean(diff**2)),
            mae=float(np.mean(np.abs(diff))),
            horizon=horizon,
        )

    if task_name == "anomaly":
        if predictions.shape != targets.shape:
            raise ConfigurationError(f"flag shape {predictions.shape} != label shape {targets.shape}")
        flags = predictions.astype(bool)
        labels = targets.astype(bool)
        adjust = True if point_adjust is None else point_adjust
        if isinstance(task, TaskConfig):
            adjust = task.point_adjust if point_adjust is None else point_adjust
        if adjust:
            flags = point_adjust_flags(flags, labels)
        precision, recall, f1 = precision_recall_f1(flags, labels)
        return MetricRecord(task=task_name, precision=precision, recall=recall, f1=f1, horizon=horizon)

    # classify
    if predictions.ndim == 2:
        predicted = predictions.argmax(axis=1)  # argmax takes the lower index on ties
    else:
        predicted = predictions.astype(np.int64)
    targets = targets.astype(np.int64).ravel()
    if predicted.shape != targets.shape:
        raise ConfigurationError(f"prediction count {predicted.shape} != target count {targets.shape}")
    return MetricRecord(task=task_name, accuracy=float(np.mean(predicted == targets)), horizon=horizon)
