"""Series ingestion, windowing, patch embedding, decomposition and masking.

Everything here is pure numpy and deterministic given (inputs, seed); the
torch training pipeline re-implements the patch embedding in vectorized form
and is tested for agreement against :func:`patchify`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError

# Patches with std below this normalize to zeros and set the guard flag.
STD_GUARD_EPS = 1e-5

# Feature layout fed to the patch embedding: the normalized patch followed by
# its (mean, std) pair, so tokens keep level/scale information that per-patch
# normalization would otherwise discard.
PATCH_FEATURE_EXTRA = 2


@dataclass
class SeriesTensor:
    """A length-L, V-variate series with optional timestamps and labels."""

    values: np.ndarray  # L x V, float64
    timestamps: list[str] | None = None
    point_labels: np.ndarray | None = None  # length L, 0/1
    class_label: int | None = None
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ConfigurationError(f"series must be L x V with L,V >= 1, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise IngestionError(f"non-finite value at (row {bad[0]}, col {bad[1]})")
        if self.timestamps is not None:
            if len(self.timestamps) != len(self.values):
                raise ConfigurationError("timestamps length does not match series length")
            for i in range(1, len(self.timestamps)):
                if not self.timestamps[i] > self.timestamps[i - 1]:
                    raise ConfigurationError(f"timestamps not strictly increasing at row {i}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (len(self.values),):
                raise ConfigurationError("point_labels length does not match series length")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowSet:
    """Input/target window pairs cut from one chronological split."""

    inputs: np.ndarray  # n x L_in x V
    targets: np.ndarray  # n x N x V (forecast) or n x L_in x V (reconstruction)
    origins: np.ndarray  # n, start offset of each input in the parent series
    lookback: int
    horizon: int

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class PatchTokens:
    """Embedded patches of one channel plus the stats needed to denormalize."""

    tokens: np.ndarray  # S x D
    patch_len: int
    stride: int
    denorm_stats: np.ndarray  # S x 2, (mean, std) per patch; std is the raw value
    channel_id: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def guard_fired(self) -> np.ndarray:
        """Boolean per patch: std fell below the guard and the patch normalized to zeros."""
        return self.denorm_stats[:, 1] < STD_GUARD_EPS


@dataclass
class ImputationMask:
    """Binary observation mask (1 = observed, 0 = missing) for one window."""

    mask: np.ndarray  # L_in x V, int8
    ratio: float

    @property
    def n_missing(self) -> int:
        return int(self.mask.size - self.mask.sum())


@dataclass
class DecompositionTriple:
    """Additive trend/seasonal/residual components of a window."""

    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.trend + self.seasonal + self.residual


@dataclass
class LinearEmbed:
    """The learned linear map applied to patch features, shared across channels."""

    weight: np.ndarray  # D x (P + 2)
    bias: np.ndarray  # D

    @classmethod
    def seeded(cls, patch_len: int, width: int, seed: int) -> "LinearEmbed":
        rng = np.random.default_rng(seed)
        fan_in = patch_len + PATCH_FEATURE_EXTRA
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(width, fan_in))
        b = rng.uniform(-bound, bound, size=width)
        return cls(weight=w, bias=b)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias


def load_dataset(path, schema: str = "series") -> SeriesTensor:
    """Read an ETT-convention CSV: optional leading `date` column, numeric variates.

    `schema` tags the dataset kind; "series" and "anomaly-data" both parse the
    same wide numeric layout (anomaly labels are attached separately by
    :func:`load_anomaly_labels`).
    """
    path = Path(path)
    if schema not in ("series", "anomaly-data"):
        raise ConfigurationError(f"unknown dataset schema {schema!r}")
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, header row required") from None
        has_date = bool(header) and header[0].strip().lower() in ("date", "timestamp", "time")
        first_col = 1 if has_date else 0
        n_cols = len(header) - first_col
        if n_cols < 1:
            raise IngestionError(f"{path}: no numeric columns after the date column")
        rows = []
        stamps = [] if has_date else None
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise IngestionError(f"{path}: malformed row {i} ({len(row)} fields, expected {len(header)})")
            if has_date:
                stamps.append(row[0])
            vals = []
            for j, cell in enumerate(row[first_col:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: non-numeric cell at (row {i}, col {header[first_col + j]!r})"
                    ) from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}: non-finite value at (row {i}, col {header[first_col + j]!r})")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    return SeriesTensor(values=np.array(rows, dtype=np.float64), timestamps=stamps, name=path.stem)


def load_anomaly_labels(series: SeriesTensor, label_path) -> SeriesTensor:
    """Attach a 0/1-per-step label CSV to an already loaded series."""
    labels = load_dataset(label_path)
    if labels.length != series.length or labels.n_variates != 1:
        raise IngestionError(
            f"label file shape {labels.values.shape} does not match series length {series.length}"
        )
    vals = labels.values[:, 0]
    if not np.all(np.isin(vals, (0.0, 1.0))):
        bad = int(np.argwhere(~np.isin(vals, (0.0, 1.0)))[0][0])
        raise IngestionError(f"{label_path}: label at row {bad} is not 0/1")
    series.point_labels = vals.astype(np.int64)
    return series


def load_classification_manifest(manifest_path) -> list[SeriesTensor]:
    """Read a `path,label` manifest; paths resolve relative to the manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestionError(f"manifest not found: {manifest_path}")
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["path", "label"]:
            raise IngestionError(f"{manifest_path}: manifest header must be 'path,label'")
        for i, row in enumerate(reader):
            if len(row) < 2:
                raise IngestionError(f"{manifest_path}: malformed manifest row {i}")
            sample = load_dataset(manifest_path.parent / row[0])
            try:
                sample.class_label = int(row[1])
            except ValueError:
                raise IngestionError(f"{manifest_path}: non-integer label at row {i}") from None
            samples.append(sample)
    if not samples:
        raise IngestionError(f"{manifest_path}: empty manifest")
    return samples


def split_bounds(length: int, split: tuple[float, float, float]) -> list[tuple[int, int]]:
    """Chronological [start, end) bounds for (train, val, test) fractions."""
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be non-negative and sum to 1, got {split}")
    n_train = int(math.floor(split[0] * length))
    n_val = int(math.floor(split[1] * length))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, length)]


def make_windows(
    series: SeriesTensor,
    lookback: int,
    horizon: int,
    stride: int = 1,
    split: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> dict[str, WindowSet]:
    """Cut chronological train/val/test windows; targets follow inputs contiguously.

    With horizon 0 the targets are copies of the inputs (reconstruction tasks).
    Windows never cross split boundaries, so the splits stay disjoint in time.
    """
    if lookback < 1 or stride < 1 or horizon < 0:
        raise ConfigurationError(f"need lookback >= 1, stride >= 1, horizon >= 0")
    if lookback + horizon > series.length:
        raise ConfigurationError(
            f"lookback + horizon = {lookback + horizon} exceeds series length {series.length}"
        )
    out = {}
    for name, (lo, hi) in zip(("train", "val", "test"), split_bounds(series.length, split)):
        seg = hi - lo
        n = (seg - lookback - horizon) // stride + 1 if seg >= lookback + horizon else 0
        inputs, targets, origins = [], [], []
        for w in range(max(n, 0)):
            start = lo + w * stride
            inputs.append(series.values[start : start + lookback])
            if horizon > 0:
                targets.append(series.values[start + lookback : start + lookback + horizon])
            else:
                targets.append(series.values[start : start + lookback])
            origins.append(start)
        shape_in = (len(inputs), lookback, series.n_variates)
        shape_tg = (len(inputs), horizon if horizon > 0 else lookback, series.n_variates)
        out[name] = WindowSet(
            inputs=np.array(inputs, dtype=np.float64).reshape(shape_in),
            targets=np.array(targets, dtype=np.float64).reshape(shape_tg),
            origins=np.array(origins, dtype=np.int64),
            lookback=lookback,
            horizon=horizon,
        )
    return out


def patch_count(lookback: int, patch_len: int, stride: int) -> int:
    return (lookback - patch_len) // stride + 1


def instance_normalize(patch: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Standardize one patch (population convention); flat patches map to zeros.

    Returns (normalized, mean, std) with the raw std, so
    ``denormalize(normalized, mean, std)`` recovers the input exactly even when
    the guard fired (the patch is then constant and equal to its mean).
    """
    patch = np.asarray(patch, dtype=np.float64)
    mean = float(patch.mean())
    std = float(patch.std())
    if std < STD_GUARD_EPS:
        return np.zeros_like(patch), mean, std
    return (patch - mean) / std, mean, std


def denormalize(normalized: np.ndarray, mean: float, std: float) -> np.ndarray:
    return normalized * std + mean


def patch_features(channel: np.ndarray, patch_len: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Slice one channel into patches and build the (normalized, mean, std) features.

    Returns (features S x (P+2), stats S x 2). Remainder steps that do not fill
    a final patch are dropped.
    """
    lookback = len(channel)
    if patch_len > lookback:
        raise ConfigurationError(f"patch length {patch_len} exceeds lookback {lookback}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    s = patch_count(lookback, patch_len, stride)
    feats = np.empty((s, patch_len + PATCH_FEATURE_EXTRA), dtype=np.float64)
    stats = np.empty((s, 2), dtype=np.float64)
    for t in range(s):
        normalized, mean, std = instance_normalize(channel[t * stride : t * stride + patch_len])
        feats[t, :patch_len] = normalized
        feats[t, patch_len] = mean
        feats[t, patch_len + 1] = std
        stats[t] = (mean, std)
    return feats, stats


def patchify(
    window: np.ndarray,
    patch_len: int,
    stride: int,
    width: int,
    embed: LinearEmbed,
) -> list[PatchTokens]:
    """Embed one L_in x V window into per-channel token matrices (S x D each)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    if embed.weight.shape != (width, patch_len + PATCH_FEATURE_EXTRA):
        raise ConfigurationError(
            f"embed weight shape {embed.weight.shape} does not match (D={width}, P+2={patch_len + 2})"
        )
    out = []
    for ch in range(window.shape[1]):
        feats, stats = patch_features(window[:, ch], patch_len, stride)
        out.append(
            PatchTokens(
                tokens=embed(feats),
                patch_len=patch_len,
                stride=stride,
                denorm_stats=stats,
                channel_id=ch,
            )
        )
    return out


def decompose_additive(window: np.ndarray, period: int, kernel: int) -> DecompositionTriple:
    """Trend by centered moving average, seasonal by re-centered per-phase means.

    The residual is defined as the remainder, so the three components sum back
    to the input exactly.
    """
    window = np.asarray(window, dtype=np.float64)
    squeeze = window.ndim == 1
    if squeeze:
        window = window[:, None]
    length = window.shape[0]
    if period < 1:
        raise ConfigurationError("period must be >= 1")
    if kernel % 2 == 0 or kernel < 1 or kernel > length:
        raise ConfigurationError(f"kernel must be odd and <= window length, got {kernel} for length {length}")
    half = kernel // 2
    padded = np.concatenate(
        [np.repeat(window[:1], half, axis=0), window, np.repeat(window[-1:], half, axis=0)], axis=0
    )
    ker = np.ones(kernel) / kernel
    trend = np.stack(
        [np.convolve(padded[:, ch], ker, mode="valid") for ch in range(window.shape[1])], axis=1
    )
    detrended = window - trend
    seasonal = np.empty_like(window)
    for phase in range(period):
        seasonal[phase::period] = detrended[phase::period].mean(axis=0)
    seasonal -= seasonal.mean(axis=0)
    residual = window - trend - seasonal
    if squeeze:
        trend, seasonal, residual = trend[:, 0], seasonal[:, 0], residual[:, 0]
    return DecompositionTriple(trend=trend, seasonal=seasonal, residual=residual)


def make_imputation_mask(shape: tuple[int, int], ratio: float, rng: np.random.Generator) -> ImputationMask:
    """Uniformly random missing cells; realized count = round(ratio * cells)."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in (0, 1), got {ratio}")
    length, variates = shape
    n_cells = length * variates
    n_missing = int(round(ratio * n_cells))
    mask = np.ones(n_cells, dtype=np.int8)
    missing = rng.choice(n_cells, size=n_missing, replace=False)
    mask[missing] = 0
    return ImputationMask(mask=mask.reshape(length, variates), ratio=ratio)


def standardize(series: SeriesTensor, train_fraction: float) -> tuple[SeriesTensor, np.ndarray, np.ndarray]:
    """Dataset-level standardization fitted on the chronological train region."""
    n_train = int(math.floor(train_fraction * series.length))
    if n_train < 2:
        raise ConfigurationError("train region too short to fit standardization")
    mu = series.values[:n_train].mean(axis=0)
    sigma = series.values[:n_train].std(axis=0)
    sigma = np.where(sigma < STD_GUARD_EPS, 1.0, sigma)
    out = SeriesTensor(
        values=(series.values - mu) / sigma,
        timestamps=series.timestamps,
        point_labels=series.point_labels,
        class_label=series.class_label,
        name=series.name,
    )
    return out, mu, sigma
