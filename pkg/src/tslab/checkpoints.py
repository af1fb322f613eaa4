"""Checkpoint archive (zip of .npy tensors + plain-text manifest) and a tiny
next-token pretrainer so the "LLM" variant loads genuinely structured weights.

Manifest lines are `name,shape,dtype` with shape written `d0xd1x...`; a
`meta.json` member records the architecture used at pretraining time.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import Backbone, VariantSpec
from .errors import CheckpointError

MANIFEST_NAME = "manifest.txt"
META_NAME = "meta.json"


def _shape_str(shape) -> str:
    return "x".join(str(int(d)) for d in shape) if len(shape) else "scalar"


def save_checkpoint(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> Path:
    """Write tensors atomically as a zip with a manifest naming every entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    manifest_lines = []
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            manifest_lines.append(f"{name},{_shape_str(arr.shape)},{arr.dtype.name}")
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())
        zf.writestr(MANIFEST_NAME, "\n".join(manifest_lines) + "\n")
        if meta is not None:
            zf.writestr(META_NAME, json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read the archive back, validating every tensor against the manifest."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors: dict[str, np.ndarray] = {}
    problems: list[str] = []
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = zf.read(MANIFEST_NAME).decode()
        except KeyError:
            raise CheckpointError(f"{path}: missing {MANIFEST_NAME}") from None
        for line in manifest.splitlines():
            if not line.strip():
                continue
            try:
                name, shape_s, dtype_s = line.rsplit(",", 2)
            except ValueError:
                raise CheckpointError(f"{path}: malformed manifest line {line!r}") from None
            try:
                arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            except KeyError:
                problems.append(f"{name}: listed in manifest but absent")
                continue
            want = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            if arr.shape != want:
                problems.append(f"{name}: manifest shape {want} but stored {arr.shape}")
                continue
            if arr.dtype.name != dtype_s:
                problems.append(f"{name}: manifest dtype {dtype_s} but stored {arr.dtype.name}")
                continue
            tensors[name] = arr
    if problems:
        raise CheckpointError(f"{path}: invalid checkpoint — " + "; ".join(problems))
    return tensors


def checkpoint_meta(path) -> dict:
    with zipfile.ZipFile(Path(path)) as zf:
        try:
            return json.loads(zf.read(META_NAME).decode())
        except KeyError:
            return {}


def load_into_backbone(backbone: Backbone, path) -> None:
    """Copy checkpoint tensors into the backbone, validating names and shapes."""
    tensors = load_checkpoint(path)
    problems: list[str] = []
    with torch.no_grad():
        for name, param in backbone.named_parameters():
            if name not in tensors:
                problems.append(f"{name}: missing from checkpoint")
                continue
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                problems.append(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {tuple(param.shape)}")
                continue
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))
    if problems:
        raise CheckpointError(f"{path}: cannot load — " + "; ".join(problems))


class TinyLM(nn.Module):
    """Token-embedding + causal transformer core with a tied output head."""

    def __init__(self, vocab: int, spec: VariantSpec, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 1)
        self.token_embedding = nn.Embedding(vocab, spec.width)
        with torch.no_grad():
            self.token_embedding.weight.normal_(0.0, 0.02, generator=gen)
        self.core = Backbone(spec)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.core(self.token_embedding(ids))
        return h @ self.token_embedding.weight.T


def _markov_corpus(vocab: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """A seeded first-order Markov token stream with sparse, peaked transitions."""
    trans = rng.random((vocab, vocab)) ** 4
    keep = rng.integers(0, vocab, size=(vocab, max(2, vocab // 8)))
    mask = np.zeros((vocab, vocab), dtype=bool)
    for i in range(vocab):
        mask[i, keep[i]] = True
    trans = np.where(mask, trans + 1e-3, 1e-6)
    trans /= trans.sum(axis=1, keepdims=True)
    out = np.empty(length, dtype=np.int64)
    state = int(rng.integers(0, vocab))
    for t in range(length):
        out[t] = state
        state = int(rng.choice(vocab, p=trans[state]))
    return out


def pretrain_tiny(
    path,
    width: int = 32,
    depth: int = 2,
    heads: int = 4,
    vocab: int = 64,
    max_len: int = 128,
    seq_len: int = 32,
    steps: int = 200,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> Path:
    """Pretrain a tiny causal LM on a seeded Markov corpus and save a checkpoint.

    The saved tensors use the backbone's canonical names plus `token_embedding`,
    so the archive serves both the LLM variant and the prototype bank.
    """
    torch.manual_seed(seed)
    spec = VariantSpec(kind="random", width=width, depth=depth, heads=heads, seed=seed, max_len=max_len)
    model = TinyLM(vocab, spec, seed)
    rng = np.random.default_rng(seed)
    corpus = _markov_corpus(vocab, steps * batch_size + seq_len + 1, rng)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    first_loss = last_loss = float("nan")
    for step in range(steps):
        starts = rng.integers(0, len(corpus) - seq_len - 1, size=batch_size)
        batch = np.stack([corpus[s : s + seq_len + 1] for s in starts])
        ids = torch.from_numpy(batch[:, :-1])
        target = torch.from_numpy(batch[:, 1:])
        logits = model(ids)
        loss = loss_fn(logits.reshape(-1, vocab), target.reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_loss = float(loss.detach())
        if step == 0:
            first_loss = last_loss
    tensors = {"token_embedding": model.token_embedding.weight.detach().numpy()}
    for name, param in model.core.named_parameters():
        tensors[name] = param.detach().numpy()
    meta = {
        "width": width, "depth": depth, "heads": heads, "vocab": vocab,
        "max_len": max_len, "seq_len": seq_len, "steps": steps, "seed": seed,
        "first_loss": first_loss, "final_loss": last_loss,
    }
    return save_checkpoint(tensors, path, meta=meta)
