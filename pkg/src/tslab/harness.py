"""Experiment harness: configuration, pipeline assembly, the training-loop
contract (Adam + learning-rate grid + patience), result persistence, win
tallying across variants, and variant comparison."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import Mixer, MixerSpec, PrototypeBank, TrainableMask, VariantSpec, build_variant
from .data import (
    SeriesTensor,
    decompose_additive,
    load_anomaly_labels,
    load_classification_manifest,
    load_dataset,
    make_imputation_mask,
    make_windows,
    patch_count,
    patch_features,
    standardize,
)
from .diagnostics import ResidualDiagnostics, alignment_report, pooled_residual_acf
from .errors import ConfigurationError
from .heads import (
    ClassifyHead,
    ForecastHead,
    MetricRecord,
    ReconstructHead,
    TaskConfig,
    anomaly_threshold,
    evaluate,
    masked_mse,
)

LR_GRID_DEFAULT = (1e-2, 1e-3, 1e-4)
SEED_ENV_VAR = "TSLAB_SEED"
PROTOTYPE_BANK_SIZE = 64


@dataclass
class ExperimentConfig:
    """One experiment: dataset, task, variant, shapes, optimizer budget, seed."""

    dataset: str
    task: TaskConfig
    variant: VariantSpec
    schema: str = "series"
    label_path: str | None = None
    lookback: int = 96
    window_stride: int = 1
    patch_len: int = 16
    stride: int = 8
    decomp_period: int = 24
    decomp_kernel: int = 25
    lr_grid: tuple = LR_GRID_DEFAULT
    epochs: int = 10
    patience: int = 3
    batch_size: int = 32
    seed: int = 0
    split: tuple = (0.7, 0.1, 0.2)
    standardize_data: bool = True
    output_dir: str = "runs"
    capture_alignment: bool = False

    def __post_init__(self):
        self.task = TaskConfig.parse(self.task)
        self.variant = VariantSpec.parse(self.variant)
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        self.split = tuple(float(v) for v in self.split)
        if not self.lr_grid:
            raise ConfigurationError("lr_grid must not be empty")
        if self.lookback < 1 or self.patch_len < 1 or self.stride < 1:
            raise ConfigurationError("lookback, patch_len, stride must be >= 1")
        if self.patch_len > self.lookback:
            raise ConfigurationError(f"patch_len {self.patch_len} exceeds lookback {self.lookback}")
        if self.task.task in ("impute", "anomaly") and self.lookback % self.patch_len != 0:
            raise ConfigurationError(
                f"reconstruction tasks need lookback divisible by patch_len "
                f"({self.lookback} % {self.patch_len} != 0)"
            )
        if self.epochs < 1 or self.patience < 0 or self.batch_size < 1:
            raise ConfigurationError("bad optimizer budget")

    @classmethod
    def parse(cls, value) -> "ExperimentConfig":
        if isinstance(value, ExperimentConfig):
            return value
        value = dict(value)
        seed = int(value.get("seed", 0))
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                seed = int(env_seed)
            except ValueError:
                raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
        variant = value.get("variant", {"kind": "linear"})
        if isinstance(variant, str):
            variant = {"kind": variant}
        if not isinstance(variant, VariantSpec):
            variant = dict(variant)
            variant.setdefault("seed", seed)
        return cls(
            dataset=str(value.get("dataset", "")),
            task=TaskConfig.parse(value.get("task", {})),
            variant=VariantSpec.parse(variant),
            schema=str(value.get("schema", "series")),
            label_path=value.get("label_path"),
            lookback=int(value.get("lookback", 96)),
            window_stride=int(value.get("window_stride", 1)),
            patch_len=int(value.get("patch_len", 16)),
            stride=int(value.get("stride", 8)),
            decomp_period=int(value.get("decomp_period", 24)),
            decomp_kernel=int(value.get("decomp_kernel", 25)),
            lr_grid=tuple(value.get("lr_grid", LR_GRID_DEFAULT)),
            epochs=int(value.get("epochs", 10)),
            patience=int(value.get("patience", 3)),
            batch_size=int(value.get("batch_size", 32)),
            seed=seed,
            split=tuple(value.get("split", (0.7, 0.1, 0.2))),
            standardize_data=bool(value.get("standardize", True)),
            output_dir=str(value.get("output_dir", "runs")),
            capture_alignment=bool(value.get("capture_alignment", False)),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.parse(json.load(fh))

    def to_json_dict(self) -> dict:
        variant = self.variant
        return {
            "dataset": self.dataset,
            "schema": self.schema,
            "label_path": self.label_path,
            "task": {
                "task": self.task.task,
                "horizon": list(self.task.horizon) if self.task.horizon else None,
                "mask_ratio": list(self.task.mask_ratio) if self.task.mask_ratio else None,
                "anomaly_ratio": self.task.anomaly_ratio,
                "n_classes": self.task.n_classes,
                "point_adjust": self.task.point_adjust,
            },
            "variant": {
                "kind": variant.kind,
                "width": variant.width,
                "depth": variant.depth,
                "heads": variant.heads,
                "freeze_policy": {
                    "kind": variant.freeze_policy.kind,
                    "r": variant.freeze_policy.r,
                    "alpha": variant.freeze_policy.alpha,
                },
                "mechanisms": {
                    "prototypes": variant.mechanisms.prototypes,
                    "decomposition": variant.mechanisms.decomposition,
                    "mixer": variant.mechanisms.mixer,
                },
                "checkpoint": variant.checkpoint,
                "seed": variant.seed,
                "max_len": variant.max_len,
            },
            "lookback": self.lookback,
            "window_stride": self.window_stride,
            "patch_len": self.patch_len,
            "stride": self.stride,
            "decomp_period": self.decomp_period,
            "decomp_kernel": self.decomp_kernel,
            "lr_grid": list(self.lr_grid),
            "epochs": self.epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "split": list(self.split),
            "standardize": self.standardize_data,
            "output_dir": self.output_dir,
            "capture_alignment": self.capture_alignment,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    """Everything persisted for one experiment run."""

    config: dict
    config_digest: str
    seed: int
    metrics: list
    diagnostics: dict | None
    alignment: dict | None
    param_counts: dict
    selected: list
    diverged: bool
    loss_scale: str
    wall_clock_sec: float
    artifacts: dict | None = None  # in-memory arrays for figures; never serialized

    def to_json(self, include_wall_clock: bool = True) -> str:
        payload = {
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "metrics": self.metrics,
            "diagnostics": self.diagnostics,
            "alignment": self.alignment,
            "param_counts": self.param_counts,
            "selected": self.selected,
            "diverged": self.diverged,
            "loss_scale": self.loss_scale,
        }
        if include_wall_clock:
            payload["wall_clock_sec"] = self.wall_clock_sec
        return json.dumps(payload, sort_keys=True, indent=2)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json() + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "RunResult":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            config=payload["config"],
            config_digest=payload["config_digest"],
            seed=payload["seed"],
            metrics=payload["metrics"],
            diagnostics=payload.get("diagnostics"),
            alignment=payload.get("alignment"),
            param_counts=payload["param_counts"],
            selected=payload.get("selected", []),
            diverged=payload.get("diverged", False),
            loss_scale=payload.get("loss_scale", "standardized"),
            wall_clock_sec=payload.get("wall_clock_sec", 0.0),
        )


class PipelineModel(nn.Module):
    """Embedding -> (mechanisms) -> backbone -> task head, channel-independent.

    With decomposition, each additive component gets its own embedding and its
    own head; component predictions are denormalized then summed, reversing the
    decomposition.
    """

    def __init__(self, cfg: ExperimentConfig, n_channels: int, n_tokens: int, out_len: int):
        super().__init__()
        self.cfg = cfg
        self.task = cfg.task.task
        self.n_channels = n_channels
        self.n_tokens = n_tokens
        width = cfg.variant.width
        mech = cfg.variant.mechanisms
        self.n_components = 3 if mech.decomposition else 1
        feature_dim = cfg.patch_len + 2

        gen = torch.Generator().manual_seed(cfg.seed)
        self.embeds = nn.ModuleList()
        for _ in range(self.n_components):
            layer = nn.Linear(feature_dim, width)
            bound = 1.0 / math.sqrt(feature_dim)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()
            self.embeds.append(layer)

        self.proto_k = mech.prototypes
        self.mixer = None
        backbone_tokens = n_tokens
        head_tokens = n_tokens
        if self.proto_k is not None:
            if cfg.variant.checkpoint:
                bank = PrototypeBank.from_checkpoint(cfg.variant.checkpoint)
            else:
                bank = PrototypeBank.seeded(PROTOTYPE_BANK_SIZE, width, cfg.seed)
            if bank.width != width:
                raise ConfigurationError(f"prototype bank width {bank.width} != model width {width}")
            if self.proto_k > bank.size:
                raise ConfigurationError(f"prototypes K={self.proto_k} exceeds bank size {bank.size}")
            self.register_buffer("prototype_vectors", torch.from_numpy(bank.vectors).to(torch.float32))
            self.bank_source = bank.source
            if mech.mixer is not None:
                self.mixer = Mixer(
                    MixerSpec(m=mech.mixer), n_tokens_in=self.proto_k + n_tokens, width=width,
                    seed=cfg.seed + 1,
                )
                backbone_tokens = mech.mixer
                head_tokens = mech.mixer
            else:
                backbone_tokens = self.proto_k + n_tokens
                head_tokens = n_tokens
        elif mech.mixer is not None:
            raise ConfigurationError("mixer mechanism requires prototypes")

        self.backbone, self.backbone_mask = build_variant(cfg.variant, seq_len=backbone_tokens)

        self.heads = nn.ModuleList()
        if self.task == "forecast":
            for _ in range(self.n_components):
                self.heads.append(ForecastHead(head_tokens, width, out_len, gen))
        elif self.task in ("impute", "anomaly"):
            for _ in range(self.n_components):
                self.heads.append(ReconstructHead(head_tokens, width, out_len, gen))
        else:
            self.classify_head = ClassifyHead(width, n_channels * self.n_components, out_len, gen)
        self.out_len = out_len

    def _through_backbone(self, tokens: torch.Tensor, capture: bool = False):
        """tokens: (B', S, D) -> (B', S_head, D), applying prototype/mixer fusion."""
        if self.proto_k is not None:
            with torch.no_grad():
                means = tokens.mean(dim=1)
                scores = means @ self.prototype_vectors.T / math.sqrt(tokens.shape[-1])
                order = torch.argsort(-scores, dim=1, stable=True)[:, : self.proto_k]
            protos = self.prototype_vectors[order]  # (B', K, D)
            fused = torch.cat([protos, tokens], dim=1)
            if self.mixer is not None:
                fused = self.mixer(fused)
                out = self.backbone(fused, capture=capture)
                return out
            out = self.backbone(fused, capture=capture)
            if capture:
                h, (pre, post) = out
                return h[:, self.proto_k :, :], (pre, post)
            return out[:, self.proto_k :, :]
        return self.backbone(tokens, capture=capture)

    def _embed(self, feats: torch.Tensor) -> torch.Tensor:
        """feats: B x C x S x F with C = n_components * V, component-major."""
        if self.n_components == 1:
            return self.embeds[0](feats)
        v = feats.shape[1] // self.n_components
        parts = [self.embeds[j](feats[:, j * v : (j + 1) * v]) for j in range(self.n_components)]
        return torch.cat(parts, dim=1)

    def forward(self, feats: torch.Tensor, stats: torch.Tensor | None = None, capture: bool = False):
        b, c, s, _ = feats.shape
        if c != self.n_channels * self.n_components:
            raise ConfigurationError(
                f"expected {self.n_channels * self.n_components} channels, got {c}"
            )
        tokens = self._embed(feats)  # B x C x S x D
        width = tokens.shape[-1]
        flat = tokens.reshape(b * c, s, width)
        if capture:
            hidden, (pre, post) = self._through_backbone(flat, capture=True)
        else:
            hidden = self._through_backbone(flat)

        if self.task == "classify":
            pooled = hidden.reshape(b, c, hidden.shape[-2], width)
            scores = self.classify_head(pooled)
            return (scores, (pre, post)) if capture else scores

        if stats is None:
            raise ConfigurationError("denormalization statistics are required for regression heads")
        hidden = hidden.reshape(b, c, hidden.shape[-2], width)
        v = self.n_channels
        outputs = []
        for j in range(self.n_components):
            comp_hidden = hidden[:, j * v : (j + 1) * v]
            raw = self.heads[j](comp_hidden)  # B x V x out_len
            comp_stats = stats[:, j * v : (j + 1) * v]  # B x V x S x 2
            if self.task == "forecast":
                mean = comp_stats[:, :, -1, 0:1]
                std = comp_stats[:, :, -1, 1:2]
                outputs.append(raw * std + mean)
            else:
                bs, vv, s_tokens, _ = comp_stats.shape
                patches = raw.reshape(bs, vv, s_tokens, -1)
                mean = comp_stats[..., 0:1]
                std = comp_stats[..., 1:2]
                outputs.append((patches * std + mean).reshape(bs, vv, -1))
        pred = torch.stack(outputs, dim=0).sum(dim=0)  # B x V x out_len
        pred = pred.transpose(1, 2)  # B x out_len x V
        return (pred, (pre, post)) if capture else pred


def _component_channels(window: np.ndarray, cfg: ExperimentConfig) -> list[np.ndarray]:
    """Univariate channel list, component-major when decomposition is active."""
    if cfg.variant.mechanisms.decomposition:
        triple = decompose_additive(window, cfg.decomp_period, cfg.decomp_kernel)
        comps = (triple.trend, triple.seasonal, triple.residual)
        return [comp[:, v] for comp in comps for v in range(window.shape[1])]
    return [window[:, v] for v in range(window.shape[1])]


def _featurize(windows, cfg: ExperimentConfig, patch_stride: int):
    """Stack per-window, per-channel patch features and denorm stats."""
    if len(windows) == 0:
        empty = torch.empty((0, 0, 0, 0), dtype=torch.float32)
        return empty, empty
    feats_all, stats_all = [], []
    for window in windows:
        feats_ch, stats_ch = [], []
        for channel in _component_channels(np.asarray(window, dtype=np.float64), cfg):
            feats, stats = patch_features(channel, cfg.patch_len, patch_stride)
            feats_ch.append(feats)
            stats_ch.append(stats)
        feats_all.append(np.stack(feats_ch))
        stats_all.append(np.stack(stats_ch))
    feats = torch.from_numpy(np.stack(feats_all)).to(torch.float32)
    stats = torch.from_numpy(np.stack(stats_all)).to(torch.float32)
    return feats, stats


def _batch_slices(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield torch.from_numpy(np.ascontiguousarray(idx[i : i + batch_size]))


def _eval_loss(model: nn.Module, loss_fn, n: int, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in _batch_slices(n, batch_size):
            total += float(loss_fn(model, batch)) * len(batch)
            count += len(batch)
    model.train()
    return total / max(count, 1)


def _train_with_lr(model_factory, loss_fn, n_train: int, n_val: int, val_loss_fn, cfg: ExperimentConfig, lr: float):
    """Train one fresh model at one learning rate; returns (model, info)."""
    torch.manual_seed(cfg.seed)
    model = model_factory()
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    info = {"lr": lr, "selected_epoch": -1, "val_loss": None, "diverged": False}
    if not params or n_train == 0:
        val = _eval_loss(model, val_loss_fn, n_val, cfg.batch_size) if n_val else float("inf")
        info["val_loss"] = val
        info["selected_epoch"] = 0
        return model, info
    opt = torch.optim.Adam(params, lr=lr)
    best_val = float("inf")
    best_state = None
    since_best = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        diverged = False
        epoch_loss, epoch_count = 0.0, 0
        for batch in _batch_slices(n_train, cfg.batch_size, order):
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(batch)
            epoch_count += len(batch)
        if diverged:
            info["diverged"] = True
            break
        if n_val:
            val = _eval_loss(model, val_loss_fn, n_val, cfg.batch_size)
        else:
            # no validation windows: select on the training epoch loss instead
            val = epoch_loss / max(epoch_count, 1)
        if not math.isfinite(val):
            info["diverged"] = True
            break
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            info["selected_epoch"] = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
        info["val_loss"] = best_val
    else:
        info["val_loss"] = float("inf")
        if info["selected_epoch"] < 0:
            info["selected_epoch"] = 0
    model.eval()
    return model, info


def _train_over_grid(model_factory, loss_fn, n_train, n_val, val_loss_fn, cfg: ExperimentConfig):
    """Learning-rate grid search by validation loss; ties keep the first
    (largest) rate tried, so the choice is deterministic."""
    best = None
    for lr in sorted(cfg.lr_grid, reverse=True):
        model, info = _train_with_lr(model_factory, loss_fn, n_train, n_val, val_loss_fn, cfg, lr)
        if best is None or info["val_loss"] < best[1]["val_loss"]:
            best = (model, info)
    return best


def _residual_sequences(pred: np.ndarray, target: np.ndarray) -> list:
    """One residual sequence per (window, variate) along the output axis."""
    err = pred - target  # B x T x V
    sequences = []
    for b in range(err.shape[0]):
        for v in range(err.shape[2]):
            seq = err[b, :, v]
            if len(seq) >= 2 and np.any(seq != 0):
                sequences.append(seq)
    return sequences


def _diagnostics_from_residuals(pred: np.ndarray, target: np.ndarray, max_lag: int = 40) -> dict | None:
    sequences = _residual_sequences(pred, target)
    if not sequences or len(sequences[0]) < 2:
        return None
    lag = min(max_lag, min(len(s) for s in sequences) - 1)
    if lag < 1:
        return None
    diag = pooled_residual_acf(sequences, max_lag=lag)
    out = diag.to_json_dict()
    out["note"] = f"per-(window,variate) residuals along the output axis; {out['note']}"
    return out


def _capture_alignment(model: PipelineModel, feats: torch.Tensor, cfg: ExperimentConfig) -> dict | None:
    """Snapshot pre/post backbone clouds for a small test batch vs. the text bank."""
    width = cfg.variant.width
    n = min(feats.shape[0], 8)
    if n == 0:
        return None
    with torch.no_grad():
        tokens = model._embed(feats[:n])
        b, c, s, d = tokens.shape
        flat = tokens.reshape(b * c, s, d)
        _, (pre, post) = model._through_backbone(flat, capture=True)
    pre = pre.reshape(-1, width).numpy().astype(np.float64)
    post = post.reshape(-1, width).numpy().astype(np.float64)
    if hasattr(model, "prototype_vectors"):
        text = model.prototype_vectors.numpy().astype(np.float64)
    else:
        text = PrototypeBank.seeded(PROTOTYPE_BANK_SIZE, width, cfg.seed).vectors
    cap = 512
    if pre.shape[0] > cap:
        pre, post = pre[:cap], post[:cap]
    k = min(10, pre.shape[0] - 1)
    if k < 1:
        return None
    report = alignment_report(pre, post, text, alt_post=None, k=k, seed=cfg.seed)
    return report.to_json_dict()


def _load_series(cfg: ExperimentConfig) -> SeriesTensor:
    series = load_dataset(cfg.dataset, schema="series")
    if cfg.schema == "anomaly":
        if not cfg.label_path:
            raise ConfigurationError("anomaly schema requires label_path")
        series = load_anomaly_labels(series, cfg.label_path)
    if cfg.standardize_data:
        series, _, _ = standardize(series, train_fraction=cfg.split[0])
    return series


def run_experiment(cfg: ExperimentConfig | dict, persist: bool = True) -> RunResult:
    cfg = ExperimentConfig.parse(cfg) if not isinstance(cfg, ExperimentConfig) else cfg
    t0 = time.time()
    if not Path(cfg.dataset).exists():
        raise ConfigurationError(f"dataset path does not exist: {cfg.dataset}")
    if cfg.label_path and not Path(cfg.label_path).exists():
        raise ConfigurationError(f"label path does not exist: {cfg.label_path}")
    if cfg.variant.checkpoint and not Path(cfg.variant.checkpoint).exists():
        raise ConfigurationError(f"checkpoint does not exist: {cfg.variant.checkpoint}")
    torch.manual_seed(cfg.seed)

    task = cfg.task.task
    if task == "forecast":
        payload = _run_forecast(cfg)
    elif task == "impute":
        payload = _run_impute(cfg)
    elif task == "anomaly":
        payload = _run_anomaly(cfg)
    else:
        payload = _run_classify(cfg)

    result = RunResult(
        config=cfg.to_json_dict(),
        config_digest=cfg.digest(),
        seed=cfg.seed,
        metrics=payload["metrics"],
        diagnostics=payload.get("diagnostics"),
        alignment=payload.get("alignment"),
        param_counts=payload["param_counts"],
        selected=payload["selected"],
        diverged=payload.get("diverged", False),
        loss_scale="standardized" if cfg.standardize_data else "raw",
        wall_clock_sec=time.time() - t0,
        artifacts=payload.get("artifacts"),
    )
    if persist:
        name = f"run_{result.config_digest}_{cfg.variant.kind}_{task}.json"
        result.save(Path(cfg.output_dir) / name)
    return result


def _param_counts(model: nn.Module) -> dict:
    mask = TrainableMask.from_module(model)
    return {"total": mask.total, "trainable": mask.trainable}


def _run_forecast(cfg: ExperimentConfig) -> dict:
    series = _load_series(cfg)
    metrics, selected = [], []
    diagnostics = alignment = artifacts = None
    diverged = False
    param_counts = {}
    for horizon in cfg.task.horizon:
        splits = make_windows(series, cfg.lookback, horizon, stride=cfg.window_stride, split=cfg.split)
        train_w, val_w, test_w = splits["train"], splits["val"], splits["test"]
        if len(train_w) == 0 or len(test_w) == 0:
            raise ConfigurationError("empty train or test split; series too short for the window shape")
        n_tokens = patch_count(cfg.lookback, cfg.patch_len, cfg.stride)
        v = series.values.shape[1]

        tensors = {}
        for name, ws in (("train", train_w), ("val", val_w), ("test", test_w)):
            feats, stats = _featurize(ws.inputs, cfg, cfg.stride)
            targets = torch.from_numpy(ws.targets).to(torch.float32)
            tensors[name] = (feats, stats, targets)

        def model_factory():
            return PipelineModel(cfg, v, n_tokens, horizon)

        def make_loss(split_name):
            feats, stats, targets = tensors[split_name]

            def loss_fn(model, batch):
                pred = model(feats[batch], stats[batch])
                return torch.mean((pred - targets[batch]) ** 2)

            return loss_fn

        model, info = _train_over_grid(
            model_factory, make_loss("train"), len(train_w),
            len(val_w), make_loss("val"), cfg,
        )
        diverged = diverged or info["diverged"]
        param_counts = _param_counts(model)

        feats, stats, targets = tensors["test"]
        preds = []
        with torch.no_grad():
            for batch in _batch_slices(feats.shape[0], cfg.batch_size):
                preds.append(model(feats[batch], stats[batch]).numpy())
        pred = np.concatenate(preds).astype(np.float64)
        target = targets.numpy().astype(np.float64)
        record = evaluate(pred, target, "forecast", horizon=horizon)
        metrics.append(record.to_json_dict())
        selected.append({"horizon": horizon, "lr": info["lr"], "epoch": info["selected_epoch"],
                         "val_loss": info["val_loss"]})
        if diagnostics is None:
            diagnostics = _diagnostics_from_residuals(pred, target)
        if cfg.capture_alignment and alignment is None:
            alignment = _capture_alignment(model, feats, cfg)
        if artifacts is None:
            artifacts = {"pred": pred, "target": target, "horizon": horizon}
    return {"metrics": metrics, "selected": selected, "diagnostics": diagnostics,
            "alignment": alignment, "param_counts": param_counts, "diverged": diverged,
            "artifacts": artifacts}


def _run_impute(cfg: ExperimentConfig) -> dict:
    series = _load_series(cfg)
    splits = make_windows(series, cfg.lookback, 0, stride=cfg.lookback, split=cfg.split)
    train_w, val_w, test_w = splits["train"], splits["val"], splits["test"]
    if len(train_w) == 0 or len(test_w) == 0:
        raise ConfigurationError("empty train or test split; series too short for the window shape")
    n_tokens = patch_count(cfg.lookback, cfg.patch_len, cfg.patch_len)
    v = series.values.shape[1]
    metrics, selected = [], []
    diagnostics = alignment = artifacts = None
    diverged = False
    param_counts = {}
    for ratio_index, ratio in enumerate(cfg.task.mask_ratio):
        mask_rng = np.random.default_rng([cfg.seed, ratio_index])
        tensors = {}
        for name, ws in (("train", train_w), ("val", val_w), ("test", test_w)):
            masks = [make_imputation_mask((cfg.lookback, v), ratio, mask_rng).mask for _ in range(len(ws))]
            masked = [np.asarray(w) * m for w, m in zip(ws.inputs, masks)]
            feats, stats = _featurize(masked, cfg, cfg.patch_len)
            if len(ws) > 0:
                targets = torch.from_numpy(ws.inputs).to(torch.float32)
                obs = torch.from_numpy(np.stack(masks)).to(torch.float32)
            else:
                targets = obs = torch.empty((0, 0, 0), dtype=torch.float32)
            tensors[name] = (feats, stats, targets, obs)

        def model_factory():
            return PipelineModel(cfg, v, n_tokens, cfg.lookback)

        def make_loss(split_name):
            feats, stats, targets, obs = tensors[split_name]

            def loss_fn(model, batch):
                pred = model(feats[batch], stats[batch])
                return masked_mse(pred, targets[batch], obs[batch])

            return loss_fn

        model, info = _train_over_grid(
            model_factory, make_loss("train"), len(train_w),
            len(val_w), make_loss("val"), cfg,
        )
        diverged = diverged or info["diverged"]
        param_counts = _param_counts(model)

        feats, stats, targets, obs = tensors["test"]
        preds = []
        with torch.no_grad():
            for batch in _batch_slices(feats.shape[0], cfg.batch_size):
                preds.append(model(feats[batch], stats[batch]).numpy())
        pred = np.concatenate(preds).astype(np.float64)
        target = targets.numpy().astype(np.float64)
        record = evaluate(pred, target, "impute", mask=obs.numpy(), horizon=ratio)
        metrics.append(record.to_json_dict())
        selected.append({"mask_ratio": ratio, "lr": info["lr"], "epoch": info["selected_epoch"],
                         "val_loss": info["val_loss"]})
        if diagnostics is None:
            diagnostics = _diagnostics_from_residuals(pred, target)
        if cfg.capture_alignment and alignment is None:
            alignment = _capture_alignment(model, feats, cfg)
        if artifacts is None:
            artifacts = {"pred": pred, "target": target, "mask_ratio": ratio}
    return {"metrics": metrics, "selected": selected, "diagnostics": diagnostics,
            "alignment": alignment, "param_counts": param_counts, "diverged": diverged,
            "artifacts": artifacts}


def _run_anomaly(cfg: ExperimentConfig) -> dict:
    if cfg.schema != "anomaly":
        raise ConfigurationError("anomaly task requires schema='anomaly' with a label file")
    series = _load_series(cfg)
    splits = make_windows(series, cfg.lookback, 0, stride=cfg.lookback, split=cfg.split)
    train_w, val_w, test_w = splits["train"], splits["val"], splits["test"]
    if len(train_w) == 0 or len(test_w) == 0:
        raise ConfigurationError("empty train or test split; series too short for the window shape")
    n_tokens = patch_count(cfg.lookback, cfg.patch_len, cfg.patch_len)
    v = series.values.shape[1]

    tensors = {}
    for name, ws in (("train", train_w), ("val", val_w), ("test", test_w)):
        feats, stats = _featurize(ws.inputs, cfg, cfg.patch_len)
        targets = torch.from_numpy(ws.inputs).to(torch.float32) if len(ws) else torch.empty((0, 0, 0))
        tensors[name] = (feats, stats, targets)

    def model_factory():
        return PipelineModel(cfg, v, n_tokens, cfg.lookback)

    def make_loss(split_name):
        feats, stats, targets = tensors[split_name]

        def loss_fn(model, batch):
            pred = model(feats[batch], stats[batch])
            return torch.mean((pred - targets[batch]) ** 2)

        return loss_fn

    model, info = _train_over_grid(
        model_factory, make_loss("train"), len(train_w),
        len(val_w), make_loss("val"), cfg,
    )

    def energies_and_pred(name):
        feats, stats, targets = tensors[name]
        preds = []
        with torch.no_grad():
            for batch in _batch_slices(feats.shape[0], cfg.batch_size):
                preds.append(model(feats[batch], stats[batch]).numpy())
        pred = np.concatenate(preds).astype(np.float64)
        target = targets.numpy().astype(np.float64)
        energy = np.mean((pred - target) ** 2, axis=2).ravel()  # per-step, window-ordered
        return pred, target, energy

    _, _, train_energy = energies_and_pred("train")
    test_pred, test_target, test_energy = energies_and_pred("test")
    tau = anomaly_threshold(train_energy, test_energy, cfg.task.anomaly_ratio)
    flags = test_energy > tau

    labels_full = series.point_labels
    if labels_full is None:
        raise ConfigurationError("anomaly evaluation requires point labels")
    covered = np.concatenate([np.arange(o, o + cfg.lookback) for o in test_w.origins])
    labels = labels_full[covered]

    record = evaluate(flags.astype(int), labels, cfg.task, horizon=None)
    diagnostics = _diagnostics_from_residuals(test_pred, test_target)
    alignment = _capture_alignment(model, tensors["test"][0], cfg) if cfg.capture_alignment else None
    return {
        "metrics": [record.to_json_dict()],
        "selected": [{"lr": info["lr"], "epoch": info["selected_epoch"], "val_loss": info["val_loss"],
                      "threshold": tau}],
        "diagnostics": diagnostics,
        "alignment": alignment,
        "param_counts": _param_counts(model),
        "diverged": info["diverged"],
        "artifacts": {"energy": test_energy, "threshold": tau, "labels": labels, "flags": flags},
    }


def _run_classify(cfg: ExperimentConfig) -> dict:
    samples = load_classification_manifest(cfg.dataset)
    n_classes = cfg.task.n_classes
    labels = np.array([s.class_label for s in samples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigurationError(f"labels outside [0, {n_classes})")
    lengths = {s.values.shape for s in samples}
    if len(lengths) != 1:
        raise ConfigurationError(f"classification samples must share one shape, got {sorted(lengths)}")
    length, v = samples[0].values.shape
    if cfg.patch_len > length:
        raise ConfigurationError(f"patch_len {cfg.patch_len} exceeds sample length {length}")

    order = np.random.default_rng(cfg.seed).permutation(len(samples))
    n = len(samples)
    n_train = int(round(cfg.split[0] * n))
    n_val = int(round(cfg.split[1] * n))
    idx = {"train": order[:n_train], "val": order[n_train : n_train + n_val],
           "test": order[n_train + n_val :]}
    if len(idx["train"]) == 0 or len(idx["test"]) == 0:
        raise ConfigurationError("classification split produced an empty train or test set")

    n_tokens = patch_count(length, cfg.patch_len, cfg.stride)
    windows = [s.values for s in samples]
    feats_all, _ = _featurize(windows, cfg, cfg.stride)
    label_t = torch.from_numpy(labels)

    tensors = {name: (feats_all[torch.from_numpy(np.ascontiguousarray(ids))],
                      label_t[torch.from_numpy(np.ascontiguousarray(ids))])
               for name, ids in idx.items()}

    def model_factory():
        return PipelineModel(cfg, v, n_tokens, n_classes)

    ce = nn.CrossEntropyLoss()

    def make_loss(split_name):
        feats, ys = tensors[split_name]

        def loss_fn(model, batch):
            scores = model(feats[batch])
            return ce(scores, ys[batch])

        return loss_fn

    model, info = _train_over_grid(
        model_factory, make_loss("train"), len(idx["train"]), len(idx["val"]), make_loss("val"), cfg,
    )
    feats, ys = tensors["test"]
    scores = []
    with torch.no_grad():
        for batch in _batch_slices(feats.shape[0], cfg.batch_size):
            scores.append(model(feats[batch]).numpy())
    record = evaluate(np.concatenate(scores), ys.numpy(), "classify")
    alignment = _capture_alignment(model, feats, cfg) if cfg.capture_alignment else None
    return {
        "metrics": [record.to_json_dict()],
        "selected": [{"lr": info["lr"], "epoch": info["selected_epoch"], "val_loss": info["val_loss"]}],
        "diagnostics": None,
        "alignment": alignment,
        "param_counts": _param_counts(model),
        "diverged": info["diverged"],
    }


def tally_wins(rows) -> dict:
    """Lowest MSE / lowest MAE per row earns a win; ties credit every winner.

    rows: iterable of either {variant: (mse, mae)} dicts or (label, dict) pairs.
    """
    normalized = []
    for i, row in enumerate(rows):
        if isinstance(row, tuple) and len(row) == 2 and isinstance(row[1], dict):
            label, cells = row
        else:
            label, cells = f"row{i}", row
        normalized.append((str(label), dict(cells)))
    if not normalized:
        raise ConfigurationError("no rows to tally")
    variants = sorted({v for _, cells in normalized for v in cells})
    for label, cells in normalized:
        for variant in variants:
            if variant not in cells:
                raise ConfigurationError(f"row {label!r} is missing variant {variant!r}")
            pair = cells[variant]
            if len(pair) != 2 or not all(math.isfinite(float(x)) for x in pair):
                raise ConfigurationError(f"row {label!r}, variant {variant!r}: need finite (mse, mae)")
    tally = {v: {"mse": 0, "mae": 0} for v in variants}
    for _, cells in normalized:
        mse_values = {v: float(cells[v][0]) for v in variants}
        mae_values = {v: float(cells[v][1]) for v in variants}
        best_mse = min(mse_values.values())
        best_mae = min(mae_values.values())
        for v in variants:
            if mse_values[v] == best_mse:
                tally[v]["mse"] += 1
            if mae_values[v] == best_mae:
                tally[v]["mae"] += 1
    return tally


def tally_results_dir(results_dir) -> dict:
    """Group persisted runs into (dataset, task, horizon) rows and tally wins."""
    results_dir = Path(results_dir)
    paths = sorted(results_dir.glob("run_*.json"))
    if not paths:
        raise ConfigurationError(f"no run_*.json files under {results_dir}")
    rows: dict[tuple, dict] = {}
    for path in paths:
        result = RunResult.load(path)
        variant = result.config["variant"]["kind"]
        dataset = result.config["dataset"]
        task = result.config["task"]["task"]
        for record in result.metrics:
            if record.get("mse") is None or record.get("mae") is None:
                continue
            key = (dataset, task, record.get("horizon"))
            rows.setdefault(key, {})[variant] = (record["mse"], record["mae"])
    if not rows:
        raise ConfigurationError("no regression metrics found to tally")
    labeled = [("|".join(str(k) for k in key), cells) for key, cells in sorted(rows.items())]
    return {"rows": {label: {v: list(pair) for v, pair in cells.items()} for label, cells in labeled},
            "tally": tally_wins(labeled)}


def compare_variants(cfg_template: ExperimentConfig | dict, kinds) -> dict:
    """Run each variant kind under the shared config; returns rows + tally."""
    base = ExperimentConfig.parse(cfg_template) if not isinstance(cfg_template, ExperimentConfig) else cfg_template
    rows = []
    cells = {}
    for kind in kinds:
        kind = str(kind).lower()
        variant_dict = {
            "kind": kind,
            "width": base.variant.width,
            "seed": base.variant.seed,
            "max_len": base.variant.max_len,
            "checkpoint": base.variant.checkpoint if kind == "llm" else None,
            "mechanisms": {
                "prototypes": base.variant.mechanisms.prototypes,
                "decomposition": base.variant.mechanisms.decomposition,
                "mixer": base.variant.mechanisms.mixer,
            },
        }
        if kind in ("llm", "random"):
            variant_dict["depth"] = base.variant.depth if base.variant.kind in ("llm", "random") else 2
            variant_dict["heads"] = base.variant.heads if base.variant.heads else 4
        elif kind in ("att", "trans"):
            variant_dict["heads"] = base.variant.heads if base.variant.heads else 4
        if kind == "llm" and not variant_dict["checkpoint"]:
            raise ConfigurationError("compare with kind=llm needs a checkpoint in the template variant")
        run_cfg_dict = base.to_json_dict()
        run_cfg_dict["variant"] = variant_dict
        result = run_experiment(ExperimentConfig.parse(run_cfg_dict))
        first = result.metrics[0]
        row = {
            "variant": kind,
            "mse": first.get("mse"),
            "mae": first.get("mae"),
            "f1": first.get("f1"),
            "accuracy": first.get("accuracy"),
            "dw": (result.diagnostics or {}).get("dw"),
            "params_total": result.param_counts["total"],
            "params_trainable": result.param_counts["trainable"],
            "selected_lr": result.selected[0].get("lr") if result.selected else None,
            "digest": result.config_digest,
        }
        rows.append(row)
        if first.get("mse") is not None and first.get("mae") is not None:
            cells[kind] = (first["mse"], first["mae"])
    comparison = {"rows": rows}
    if cells:
        comparison["tally"] = tally_wins([cells])
    return comparison
