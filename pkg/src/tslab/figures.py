"""Matplotlib figures rendered alongside the CLI's delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import AlignmentReport, ResidualDiagnostics


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def acf_figure(diag: ResidualDiagnostics, path, title: str = "Residual ACF") -> Path:
    lags = np.arange(1, len(diag.acf) + 1)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(lags, diag.acf, width=0.6, color="#4878d0")
    ax.axhline(diag.band, color="red", linestyle="--", linewidth=1)
    ax.axhline(-diag.band, color="red", linestyle="--", linewidth=1)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("lag")
    ax.set_ylabel(r"$\rho_k$")
    ax.set_title(f"{title} (DW={diag.dw:.3f}, n={diag.n})")
    return _save(fig, path)


def residual_figure(sequences, path, title: str = "Residuals") -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for i, seq in enumerate(sequences[:8]):
        ax.plot(np.asarray(seq, dtype=float), linewidth=0.9, alpha=0.8, label=f"seq {i}" if i < 4 else None)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("residual")
    ax.set_title(title)
    if len(sequences) <= 4:
        ax.legend(fontsize=7)
    return _save(fig, path)


def forecast_figure(pred: np.ndarray, target: np.ndarray, path, channel: int = 0,
                    title: str = "Forecast vs target") -> Path:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(target[:, channel], label="target", color="black", linewidth=1.2)
    ax.plot(pred[:, channel], label="prediction", color="#d65f5f", linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(f"channel {channel}")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def comparison_figure(rows, path, title: str = "Variant comparison") -> Path:
    """Bar chart per variant for whichever metrics the rows carry."""
    rows = list(rows)
    variants = [r["variant"] for r in rows]
    metric_names = [m for m in ("mse", "mae", "f1", "accuracy") if any(r.get(m) is not None for r in rows)]
    fig, axes = plt.subplots(1, max(len(metric_names), 1), figsize=(3.4 * max(len(metric_names), 1), 3.2))
    if len(metric_names) <= 1:
        axes = [axes]
    for ax, metric in zip(axes, metric_names or ["mse"]):
        values = [r.get(metric) if r.get(metric) is not None else np.nan for r in rows]
        ax.bar(variants, values, color="#6acc64")
        ax.set_title(metric.upper())
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle(title)
    return _save(fig, path)


def _pca_2d(clouds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    stacked = np.concatenate(list(clouds.values()))
    center = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - center, full_matrices=False)
    basis = vt[:2].T
    return {label: (arr - center) @ basis for label, arr in clouds.items()}


def alignment_figure(clouds: dict[str, np.ndarray], path, report: AlignmentReport | None = None,
                     title: str = "Token clouds (2-D projection)") -> Path:
    """Shared-PCA scatter of labeled token clouds (pre/post/text/...)."""
    projected = _pca_2d({k: np.asarray(v, dtype=float) for k, v in clouds.items()})
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    colors = {"ts_pre": "#4878d0", "ts_post": "#d65f5f", "text": "#6acc64", "alt_post": "#b47cc7"}
    for i, (label, pts) in enumerate(projected.items()):
        ax.scatter(pts[:, 0], pts[:, 1], s=12, alpha=0.7,
                   color=colors.get(label, f"C{i}"), label=label)
    if report is not None:
        ax.set_xlabel(
            f"shift before={report.centroid_shift_before:.3g} after={report.centroid_shift_after:.3g}"
        )
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def anomaly_figure(energy: np.ndarray, threshold: float, labels: np.ndarray | None, path,
                   title: str = "Reconstruction energy") -> Path:
    energy = np.asarray(energy, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(energy, linewidth=0.9, color="#4878d0", label="energy")
    ax.axhline(threshold, color="red", linestyle="--", linewidth=1, label="threshold")
    if labels is not None:
        marks = np.flatnonzero(np.asarray(labels).astype(bool))
        ax.scatter(marks, energy[marks], color="black", s=14, zorder=3, label="labeled anomaly")
    ax.set_xlabel("step")
    ax.set_ylabel("energy")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)
