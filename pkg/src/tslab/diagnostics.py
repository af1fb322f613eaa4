"""Residual-independence and modality-alignment instruments.

Durbin-Watson and ACF quantify whether a forecaster left structure in its
residuals; the Wasserstein/Lipschitz machinery checks the expectation-gap
bound that motivates reprogramming; the alignment report measures centroid
transfer vs. internal-structure change between token clouds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, UndefinedStatisticError

ACF_DEFAULT_MAX_LAG = 40
SLICED_DEFAULT_PROJECTIONS = 128
KNN_DEFAULT_K = 10

# Activations accepted inside an analyzable chain; all are 1-Lipschitz, so the
# chain's Lipschitz constant is bounded by the product of weight spectral norms.
_LIP1_ACTIVATIONS = ("relu", "tanh", "abs", "identity")


def durbin_watson(e: np.ndarray) -> float:
    """Sum of squared successive differences over sum of squares; ~2 iff independent."""
    e = np.asarray(e, dtype=np.float64).ravel()
    if len(e) < 2:
        raise ConfigurationError("need at least 2 residuals")
    denom = float(np.sum(e * e))
    if denom == 0.0:
        raise UndefinedStatisticError("all-zero residuals: statistic undefined")
    return float(np.sum(np.diff(e) ** 2)) / denom


def aggregate_dw(sequences) -> tuple[float, int]:
    """Arithmetic mean of per-sequence statistics; returns (mean, count)."""
    stats = [durbin_watson(s) for s in sequences]
    if not stats:
        raise ConfigurationError("empty residual collection")
    return float(np.mean(stats)), len(stats)


@dataclass
class ResidualDiagnostics:
    """Durbin-Watson statistic plus lag-indexed autocorrelations and their band."""

    dw: float
    acf: np.ndarray  # rho_1 .. rho_max_lag
    band: float  # +-1.96 / sqrt(n)
    n: int
    note: str = "single sequence"

    def to_json_dict(self) -> dict:
        return {
            "dw": self.dw,
            "acf": [float(v) for v in self.acf],
            "band": self.band,
            "n": self.n,
            "note": self.note,
        }


def residual_acf(e: np.ndarray, max_lag: int = ACF_DEFAULT_MAX_LAG) -> ResidualDiagnostics:
    """Sample autocorrelations rho_1..rho_max_lag with the 1.96/sqrt(n) band."""
    e = np.asarray(e, dtype=np.float64).ravel()
    n = len(e)
    if max_lag < 1 or max_lag >= n:
        raise ConfigurationError(f"max_lag must be in [1, n), got {max_lag} for n={n}")
    centered = e - e.mean()
    denom = float(np.sum(centered * centered))
    if denom == 0.0:
        raise UndefinedStatisticError("zero-variance residuals: ACF undefined")
    rho = np.array([float(np.sum(centered[k:] * centered[:-k])) / denom for k in range(1, max_lag + 1)])
    return ResidualDiagnostics(dw=durbin_watson(e), acf=rho, band=1.96 / np.sqrt(n), n=n)


def pooled_residual_acf(sequences, max_lag: int = ACF_DEFAULT_MAX_LAG) -> ResidualDiagnostics:
    """Per-sequence ACF averaged lag-wise; DW averaged the same way."""
    seqs = [np.asarray(s, dtype=np.float64).ravel() for s in sequences]
    if not seqs:
        raise ConfigurationError("empty residual collection")
    lag = min(max_lag, min(len(s) for s in seqs) - 1)
    if lag < 1:
        raise ConfigurationError("sequences too short for any lag")
    per = [residual_acf(s, lag) for s in seqs]
    n_total = sum(p.n for p in per)
    return ResidualDiagnostics(
        dw=float(np.mean([p.dw for p in per])),
        acf=np.mean([p.acf for p in per], axis=0),
        band=1.96 / np.sqrt(n_total / len(per)),
        n=n_total,
        note=f"mean over {len(per)} sequences",
    )


def wasserstein1_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact 1-D optimal transport: mean absolute difference of order statistics."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ConfigurationError(f"sample sizes differ ({len(x)} vs {len(y)}); unequal sizes unsupported")
    if len(x) == 0:
        raise ConfigurationError("empty sample sets")
    return float(np.mean(np.abs(np.sort(x) - np.sort(y))))


def wasserstein1_exact(x: np.ndarray, y: np.ndarray) -> float:
    """Exact empirical W1 between equal-size clouds (optimal assignment)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.ndim == 2 and x.shape[0] == 1 and x.size > 1 and y.shape[0] == 1:
        x, y = x.T, y.T
    if x.shape != y.shape:
        raise ConfigurationError(f"sample shapes differ ({x.shape} vs {y.shape})")
    if x.shape[1] == 1:
        return wasserstein1_1d(x[:, 0], y[:, 0])
    cost = cdist(x, y)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sliced_wasserstein(
    x: np.ndarray,
    y: np.ndarray,
    n_proj: int = SLICED_DEFAULT_PROJECTIONS,
    rng=0,
) -> float:
    """Mean 1-D W1 over seeded random unit directions; deterministic per seed."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"sample shapes differ ({x.shape} vs {y.shape})")
    if n_proj < 1:
        raise ConfigurationError("need at least one projection")
    if x.ndim == 1 or x.shape[1] == 1:
        return wasserstein1_1d(x, y)
    gen = _as_rng(rng)
    dims = x.shape[1]
    total = 0.0
    for _ in range(n_proj):
        u = gen.standard_normal(dims)
        u /= np.linalg.norm(u)
        total += wasserstein1_1d(x @ u, y @ u)
    return total / n_proj


@dataclass
class LinearChain:
    """A composition of linear maps and 1-Lipschitz activations, used as a probe.

    Layers are ("linear", W, b) or ("act", name) tuples in application order.
    """

    layers: list

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "linear":
                _, w, b = layer
                out = out @ np.asarray(w).T + np.asarray(b)
            elif kind == "act":
                name = layer[1]
                if name == "relu":
                    out = np.maximum(out, 0.0)
                elif name == "tanh":
                    out = np.tanh(out)
                elif name == "abs":
                    out = np.abs(out)
                elif name == "identity":
                    pass
                else:
                    raise ConfigurationError(f"layer {i}: activation {name!r} is not analyzable")
            else:
                raise ConfigurationError(f"layer {i}: unknown layer kind {kind!r}")
        return out

    @property
    def out_dim(self) -> int:
        for layer in reversed(self.layers):
            if layer[0] == "linear":
                return np.asarray(layer[1]).shape[0]
        raise ConfigurationError("chain has no linear layer")

    @classmethod
    def single(cls, w: np.ndarray, b=None) -> "LinearChain":
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        if b is None:
            b = np.zeros(w.shape[0])
        return cls(layers=[("linear", w, b)])


def spectral_norm(w: np.ndarray, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value by power iteration on W^T W."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = w.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        prev, sigma = sigma, nv
        if prev > 0 and abs(sigma - prev) / prev < tol:
            break
    return float(sigma)


def lipschitz_upper(f: LinearChain) -> float:
    """Product of layer spectral norms; an upper bound for the composition."""
    k = 1.0
    saw_linear = False
    for i, layer in enumerate(f.layers):
        kind = layer[0]
        if kind == "linear":
            k *= spectral_norm(layer[1])
            saw_linear = True
        elif kind == "act":
            if layer[1] not in _LIP1_ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: activation {layer[1]!r} is not analyzable")
        else:
            raise ConfigurationError(f"layer {i}: unknown layer kind {kind!r}")
    if not saw_linear:
        raise ConfigurationError("chain has no weight matrices to analyze")
    return k


@dataclass
class BoundCheck:
    """Expectation-gap bound verdict: |E f(S) - E f(T)| <= K * W1(S, T)."""

    lhs: float
    rhs: float
    holds: bool
    lipschitz_k: float
    w1: float  # exact empirical W1 used in the rhs
    w1_sliced: float  # sliced surrogate, reported for reference

    def to_json_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "holds": self.holds,
            "lipschitz_K": self.lipschitz_k,
            "w1": self.w1,
            "w1_sliced": self.w1_sliced,
        }


def check_reprogram_bound(
    f: LinearChain,
    source: np.ndarray,
    target: np.ndarray,
    probe_seed: int = 0,
    sliced_projections: int = SLICED_DEFAULT_PROJECTIONS,
) -> BoundCheck:
    """Verify the expectation gap of f against its Lipschitz bound on (S, T).

    The rhs uses the exact empirical W1 (sorting in 1-D, optimal assignment
    otherwise); the sliced estimate is attached for reference only, since it
    under-estimates W1 and would not give a valid bound.  Vector-valued f is
    reduced to a scalar by a fixed random unit-norm linear functional.
    """
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if source.shape[0] == 1 and source.size > 1:
        source, target = source.T, target.T
    if source.shape != target.shape:
        raise ConfigurationError(f"sample shapes differ ({source.shape} vs {target.shape})")
    k = lipschitz_upper(f)
    if f.out_dim > 1:
        rng = np.random.default_rng(probe_seed)
        w = rng.standard_normal(f.out_dim)
        w /= np.linalg.norm(w)
        f = LinearChain(layers=list(f.layers) + [("linear", w[None, :], np.zeros(1))])
    lhs = float(abs(f(source).mean() - f(target).mean()))
    w1 = wasserstein1_exact(source, target)
    w1_sliced = sliced_wasserstein(source, target, n_proj=sliced_projections, rng=probe_seed)
    rhs = k * w1
    return BoundCheck(lhs=lhs, rhs=rhs, holds=lhs <= rhs + 1e-9, lipschitz_k=k, w1=w1, w1_sliced=w1_sliced)


def knn_jaccard(a: np.ndarray, b: np.ndarray, k: int = KNN_DEFAULT_K) -> float:
    """Mean Jaccard overlap of k-NN index sets for the same tokens in two embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ConfigurationError("embeddings must describe the same tokens (equal row counts)")
    if not 1 <= k < n:
        raise ConfigurationError(f"need 1 <= k < n, got k={k}, n={n}")
    total = 0.0
    da, db = cdist(a, a), cdist(b, b)
    np.fill_diagonal(da, np.inf)
    np.fill_diagonal(db, np.inf)
    for i in range(n):
        na = set(np.argsort(da[i], kind="stable")[:k].tolist())
        nb = set(np.argsort(db[i], kind="stable")[:k].tolist())
        total += len(na & nb) / len(na | nb)
    return total / n


@dataclass
class AlignmentReport:
    """Centroid-transfer vs. structure-change summary for TS and text token clouds."""

    centroid_shift_before: float
    centroid_shift_after: float
    variance_profile: dict
    knn_jaccard: float | None
    w1_sliced: float
    lipschitz_k: float
    bound_holds: bool
    note: str = ""

    def to_json_dict(self) -> dict:
        return {
            "centroid_shift_before": self.centroid_shift_before,
            "centroid_shift_after": self.centroid_shift_after,
            "variance_profile": {key: [float(v) for v in val] for key, val in self.variance_profile.items()},
            "knn_jaccard": self.knn_jaccard,
            "w1_sliced": self.w1_sliced,
            "lipschitz_K": self.lipschitz_k,
            "bound_holds": self.bound_holds,
            "note": self.note,
        }


def alignment_report(
    ts_pre: np.ndarray,
    ts_post: np.ndarray,
    text: np.ndarray,
    alt_post: np.ndarray | None = None,
    k: int = KNN_DEFAULT_K,
    probe: LinearChain | None = None,
    seed: int = 0,
) -> AlignmentReport:
    """Compare TS token clouds before/after a backbone against a text cloud.

    knn_jaccard is computed between ts_post and alt_post (two embeddings of the
    same tokens, e.g. pretrained vs. random backbone outputs).  W1 against the
    text cloud subsamples to equal sizes with the report seed when counts
    differ.
    """
    ts_pre = np.asarray(ts_pre, dtype=np.float64)
    ts_post = np.asarray(ts_post, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if ts_pre.shape != ts_post.shape:
        raise ConfigurationError("pre/post clouds must have identical shapes")
    if text.shape[1] != ts_pre.shape[1]:
        raise ConfigurationError("text cloud width does not match TS clouds")
    n = ts_post.shape[0]
    if not 1 <= k < n:
        raise ConfigurationError(f"need 1 <= k < n, got k={k}, n={n}")

    text_centroid = text.mean(axis=0)
    shift_before = float(np.linalg.norm(ts_pre.mean(axis=0) - text_centroid))
    shift_after = float(np.linalg.norm(ts_post.mean(axis=0) - text_centroid))

    eps = 1e-12
    profile = {
        "ts_pre_std": ts_pre.std(axis=0),
        "ts_post_std": ts_post.std(axis=0),
        "text_std": text.std(axis=0),
        "post_over_pre": ts_post.std(axis=0) / np.maximum(ts_pre.std(axis=0), eps),
    }

    jac = None
    if alt_post is not None:
        jac = knn_jaccard(ts_post, np.asarray(alt_post, dtype=np.float64), k=k)

    rng = np.random.default_rng(seed)
    m = min(n, text.shape[0])
    ts_sub = ts_post if n == m else ts_post[rng.choice(n, size=m, replace=False)]
    text_sub = text if text.shape[0] == m else text[rng.choice(text.shape[0], size=m, replace=False)]
    note = "" if n == text.shape[0] else f"W1/bound computed on seeded subsample of {m} tokens per cloud"

    if probe is None:
        w = rng.standard_normal(ts_pre.shape[1])
        w /= np.linalg.norm(w)
        probe = LinearChain.single(w)
    check = check_reprogram_bound(probe, ts_sub, text_sub, probe_seed=seed)
    return AlignmentReport(
        centroid_shift_before=shift_before,
        centroid_shift_after=shift_after,
        variance_profile=profile,
        knn_jaccard=jac,
        w1_sliced=check.w1_sliced,
        lipschitz_k=check.lipschitz_k,
        bound_holds=check.holds,
        note=note,
    )


def export_embeddings(token_sets, path) -> Path:
    """Write labeled token sets as `source,token_id,dim_0..dim_{D-1}` rows."""
    items = token_sets.items() if isinstance(token_sets, dict) else token_sets
    items = [(label, np.atleast_2d(np.asarray(arr, dtype=np.float64))) for label, arr in items]
    if not items:
        raise ConfigurationError("nothing to export")
    dims = items[0][1].shape[1]
    for label, arr in items:
        if arr.shape[1] != dims:
            raise ConfigurationError(f"token set {label!r} width {arr.shape[1]} != {dims}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "token_id"] + [f"dim_{d}" for d in range(dims)])
        for label, arr in items:
            for i, row in enumerate(arr):
                writer.writerow([label, i] + [f"{v:.9g}" for v in row])
    return path


def read_embeddings(path) -> dict[str, np.ndarray]:
    """Read a file written by :func:`export_embeddings` back into arrays."""
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["source", "token_id"]:
            raise ConfigurationError(f"{path}: not an embedding export (header {header[:2]})")
        for row in reader:
            groups.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return {label: np.array(rows, dtype=np.float64) for label, rows in groups.items()}
