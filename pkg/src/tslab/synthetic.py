"""Seeded synthetic series: sinusoids, multi-seasonal mixtures, spike
injection for anomaly runs, and CSV writers in the ingestion format."""

from __future__ import annotations

import csv
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data import SeriesTensor
from .errors import ConfigurationError


def sine_series(length: int, period: float = 24.0, noise: float = 0.0, seed: int = 0,
                amplitude: float = 1.0, trend: float = 0.0, level: float = 0.0) -> SeriesTensor:
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    values = level + trend * t + amplitude * np.sin(2 * np.pi * t / period)
    if noise > 0:
        values = values + rng.normal(0.0, noise, size=length)
    return SeriesTensor(values=values[:, None])


def seasonal_series(length: int, periods=(24.0, 7 * 24.0), noise: float = 0.1,
                    seed: int = 0, n_variates: int = 1, trend: float = 0.0) -> SeriesTensor:
    """Sum of seasonal components with per-variate random phases and weights."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(n_variates):
        col = trend * t
        for period in periods:
            amp = rng.uniform(0.5, 1.5)
            phase = rng.uniform(0, 2 * np.pi)
            col = col + amp * np.sin(2 * np.pi * t / period + phase)
        if noise > 0:
            col = col + rng.normal(0.0, noise, size=length)
        cols.append(col)
    return SeriesTensor(values=np.stack(cols, axis=1))


def inject_spikes(series: SeriesTensor, n_spikes: int, magnitude_sigmas: float = 10.0,
                  seed: int = 0, start_fraction: float = 0.0, min_gap: int = 5):
    """Add isolated spikes of the stated sigma multiple; returns (series, labels)."""
    values = series.values.copy()
    length, n_var = values.shape
    lo = int(round(start_fraction * length))
    candidates = np.arange(lo + 1, length - 1)
    if n_spikes < 1 or len(candidates) < n_spikes * min_gap:
        raise ConfigurationError("not enough room for the requested spikes")
    rng = np.random.default_rng(seed)
    positions: list[int] = []
    for cand in rng.permutation(candidates):
        if all(abs(int(cand) - p) >= min_gap for p in positions):
            positions.append(int(cand))
            if len(positions) == n_spikes:
                break
    if len(positions) < n_spikes:
        raise ConfigurationError("could not place spikes with the required gap")
    labels = np.zeros(length, dtype=np.int64)
    sigma = values.std(axis=0)
    sigma[sigma == 0] = 1.0
    for pos in positions:
        var = int(rng.integers(0, n_var))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        values[pos, var] += sign * magnitude_sigmas * sigma[var]
        labels[pos] = 1
    return SeriesTensor(values=values, point_labels=labels), labels


def write_series_csv(series: SeriesTensor, path, with_date: bool = True,
                     start: str = "2020-01-01 00:00:00", step_hours: float = 1.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    length, n_var = series.values.shape
    names = [f"v{i}" for i in range(n_var)]
    t0 = datetime.fromisoformat(start)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow((["date"] if with_date else []) + names)
        for row_i in range(length):
            row = [f"{v:.10g}" for v in series.values[row_i]]
            if with_date:
                row = [(t0 + timedelta(hours=step_hours * row_i)).strftime("%Y-%m-%d %H:%M:%S")] + row
            writer.writerow(row)
    return path


def write_labels_csv(labels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"])
        for v in np.asarray(labels).ravel():
            writer.writerow([int(v)])
    return path


def make_classification_dataset(directory, n_per_class: int = 12, length: int = 64,
                                levels=(-1.0, 1.0), noise: float = 0.2, seed: int = 0,
                                n_variates: int = 1) -> Path:
    """Distinct-constant-level classes; writes per-sample CSVs plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for label, level in enumerate(levels):
            for i in range(n_per_class):
                values = level + rng.normal(0.0, noise, size=(length, n_variates))
                sample = SeriesTensor(values=values, class_label=label)
                name = f"class{label}_sample{i}.csv"
                write_series_csv(sample, directory / name, with_date=False)
                writer.writerow([name, label])
    return manifest
