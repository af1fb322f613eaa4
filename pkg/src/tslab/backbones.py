"""Backbone variant zoo: pretrained/random transformer, linear, single-layer
attention/encoder, identity; freeze policies (LayerNorm-only, LoRA, full);
text-prototype selection; Mixer token/feature fusion.

All initialization draws from an explicit seeded generator so that identical
specs produce bitwise-identical parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, ConfigurationError

VARIANT_KINDS = ("llm", "random", "linear", "att", "trans", "nollm")
LORA_DEFAULT_RANK = 8
LORA_DEFAULT_ALPHA = 16.0
PROTOTYPE_DEFAULT_K = 10
MIXER_DEFAULT_M = 16
MLP_RATIO = 4


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.zero_()


@dataclass
class FreezePolicy:
    """Which parameters stay trainable: none|layernorm_only|full_freeze|lora."""

    kind: str = "none"
    r: int = LORA_DEFAULT_RANK
    alpha: float = LORA_DEFAULT_ALPHA

    def __post_init__(self):
        if self.kind not in ("none", "layernorm_only", "full_freeze", "lora"):
            raise ConfigurationError(f"unknown freeze policy {self.kind!r}")
        if self.kind == "lora" and self.r < 1:
            raise ConfigurationError(f"lora rank must be >= 1, got {self.r}")

    @classmethod
    def parse(cls, value) -> "FreezePolicy":
        if value is None:
            return cls()
        if isinstance(value, FreezePolicy):
            return value
        if isinstance(value, dict):
            return cls(
                kind=value.get("kind", "none"),
                r=int(value.get("r", LORA_DEFAULT_RANK)),
                alpha=float(value.get("alpha", LORA_DEFAULT_ALPHA)),
            )
        text = str(value).strip().lower()
        if text.startswith("lora"):
            inner = text[4:].strip("() ")
            if inner:
                parts = [p.strip() for p in inner.split(",")]
                r = int(parts[0])
                alpha = float(parts[1]) if len(parts) > 1 else LORA_DEFAULT_ALPHA
                return cls(kind="lora", r=r, alpha=alpha)
            return cls(kind="lora")
        return cls(kind=text)


@dataclass
class MechanismSpec:
    """Optional reprogramming mechanisms attached to a pipeline."""

    prototypes: int | None = None  # K
    decomposition: bool = False
    mixer: int | None = None  # m

    def __post_init__(self):
        if self.prototypes is not None and self.prototypes < 1:
            raise ConfigurationError("prototypes K must be >= 1")
        if self.mixer is not None and self.mixer < 1:
            raise ConfigurationError("mixer m must be >= 1")

    @classmethod
    def parse(cls, value) -> "MechanismSpec":
        if value is None:
            return cls()
        if isinstance(value, MechanismSpec):
            return value
        if isinstance(value, dict):
            proto = value.get("prototypes")
            mixer = value.get("mixer")
            return cls(
                prototypes=None if proto in (None, False) else int(proto) if proto is not True else PROTOTYPE_DEFAULT_K,
                decomposition=bool(value.get("decomposition", False)),
                mixer=None if mixer in (None, False) else int(mixer) if mixer is not True else MIXER_DEFAULT_M,
            )
        # list/set of tags like ["prototypes", "mixer", "decomposition"]
        spec = cls()
        for tag in value:
            tag = str(tag).strip().lower()
            if tag.startswith("prototypes"):
                inner = tag[len("prototypes"):].strip("() ")
                spec.prototypes = int(inner) if inner else PROTOTYPE_DEFAULT_K
            elif tag.startswith("mixer"):
                inner = tag[len("mixer"):].strip("() ")
                spec.mixer = int(inner) if inner else MIXER_DEFAULT_M
            elif tag == "decomposition":
                spec.decomposition = True
            else:
                raise ConfigurationError(f"unknown mechanism {tag!r}")
        return spec


@dataclass
class MixerSpec:
    """Token/feature mixing dimensions for the fusion module."""

    m: int = MIXER_DEFAULT_M
    token_hidden: int = 64
    feature_hidden: int = 64
    activation: str = "gelu"

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError("mixer output token count m must be >= 1")
        if self.activation != "gelu":
            raise ConfigurationError(f"unsupported mixer activation {self.activation!r}")


@dataclass
class VariantSpec:
    """Declarative description of one backbone variant."""

    kind: str
    width: int = 32
    depth: int | None = None
    heads: int | None = None
    freeze_policy: FreezePolicy = field(default_factory=FreezePolicy)
    mechanisms: MechanismSpec = field(default_factory=MechanismSpec)
    checkpoint: str | None = None
    seed: int = 0
    max_len: int = 128

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in VARIANT_KINDS:
            raise ConfigurationError(f"unknown variant kind {self.kind!r}; expected one of {VARIANT_KINDS}")
        self.freeze_policy = FreezePolicy.parse(self.freeze_policy)
        self.mechanisms = MechanismSpec.parse(self.mechanisms)
        if self.kind == "llm" and not self.checkpoint:
            raise ConfigurationError("kind=llm requires a checkpoint path")
        if self.kind in ("linear", "nollm"):
            if self.depth is not None or self.heads is not None:
                raise ConfigurationError(f"kind={self.kind} forbids depth/heads")
        elif self.kind in ("att", "trans"):
            if self.depth not in (None, 1):
                raise ConfigurationError(f"kind={self.kind} is a single layer; depth must be omitted or 1")
            self.depth = 1
            if self.heads is None:
                self.heads = 4
        else:  # llm / random
            if self.depth is None:
                self.depth = 2
            if self.heads is None:
                self.heads = 4
        if self.width < 1:
            raise ConfigurationError("width must be >= 1")
        if self.heads is not None and self.width % self.heads != 0:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def parse(cls, value) -> "VariantSpec":
        if isinstance(value, VariantSpec):
            return value
        if isinstance(value, str):
            value = {"kind": value}
        value = dict(value)
        kind = str(value.get("kind", "")).lower()
        if "freeze_policy" not in value or value["freeze_policy"] is None:
            # pretrained/random transformers default to LN-only finetuning
            value["freeze_policy"] = "layernorm_only" if kind in ("llm", "random") else "none"
        return cls(
            kind=kind,
            width=int(value.get("width", 32)),
            depth=value.get("depth"),
            heads=value.get("heads"),
            freeze_policy=FreezePolicy.parse(value.get("freeze_policy")),
            mechanisms=MechanismSpec.parse(value.get("mechanisms")),
            checkpoint=value.get("checkpoint"),
            seed=int(value.get("seed", 0)),
            max_len=int(value.get("max_len", 128)),
        )


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, width: int, heads: int, causal: bool, gen: torch.Generator):
        super().__init__()
        if width % heads != 0:
            raise ConfigurationError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.causal = causal
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            _init_linear(layer, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.view(b, s, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if self.causal:
            mask = torch.triu(torch.ones(s, s, dtype=torch.bool, device=x.device), diagonal=1)
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, s, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, gen: torch.Generator):
        super().__init__()
        self.fc_in = nn.Linear(width, MLP_RATIO * width)
        self.fc_out = nn.Linear(MLP_RATIO * width, width)
        _init_linear(self.fc_in, gen)
        _init_linear(self.fc_out, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.gelu(self.fc_in(x)))


class EncoderBlock(nn.Module):
    """Pre-LN residual block: x + attn(ln_1(x)), then x + mlp(ln_2(x))."""

    def __init__(self, width: int, heads: int, causal: bool, gen: torch.Generator, with_mlp: bool = True):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads, causal, gen)
        if with_mlp:
            self.ln_2 = nn.LayerNorm(width)
            self.mlp = FeedForward(width, gen)
        else:
            self.ln_2 = None
            self.mlp = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        if self.mlp is not None:
            x = x + self.mlp(self.ln_2(x))
        return x


class Backbone(nn.Module):
    """S x D -> S x D token transformer (or its ablated stand-ins)."""

    def __init__(self, spec: VariantSpec):
        super().__init__()
        self.kind = spec.kind
        self.width = spec.width
        self.max_len = spec.max_len
        gen = torch.Generator().manual_seed(spec.seed)
        self.positional_embedding = None
        self.blocks = nn.ModuleList()
        self.ln_f = None
        self.proj = None
        self.ln = None
        if spec.kind in ("llm", "random"):
            self.positional_embedding = nn.Parameter(
                torch.empty(spec.max_len, spec.width).normal_(0.0, 0.02, generator=gen)
            )
            causal = True
            self.blocks = nn.ModuleList(
                EncoderBlock(spec.width, spec.heads, causal, gen) for _ in range(spec.depth)
            )
            self.ln_f = nn.LayerNorm(spec.width)
        elif spec.kind == "att":
            self.positional_embedding = nn.Parameter(
                torch.empty(spec.max_len, spec.width).normal_(0.0, 0.02, generator=gen)
            )
            self.blocks = nn.ModuleList([EncoderBlock(spec.width, spec.heads, False, gen, with_mlp=False)])
            self.ln_f = nn.LayerNorm(spec.width)
        elif spec.kind == "trans":
            self.positional_embedding = nn.Parameter(
                torch.empty(spec.max_len, spec.width).normal_(0.0, 0.02, generator=gen)
            )
            self.blocks = nn.ModuleList([EncoderBlock(spec.width, spec.heads, False, gen)])
            self.ln_f = nn.LayerNorm(spec.width)
        elif spec.kind == "linear":
            self.proj = nn.Linear(spec.width, spec.width)
            _init_linear(self.proj, gen)
            self.ln = nn.LayerNorm(spec.width)
        # nollm: no modules at all

    def forward(self, tokens: torch.Tensor, capture: bool = False):
        squeeze = tokens.dim() == 2
        x = tokens.unsqueeze(0) if squeeze else tokens
        if x.shape[-1] != self.width:
            raise ConfigurationError(f"token width {x.shape[-1]} does not match backbone width {self.width}")
        pre = x.detach().clone() if capture else None
        h = x
        if self.positional_embedding is not None:
            s = h.shape[-2]
            if s > self.max_len:
                raise ConfigurationError(f"sequence length {s} exceeds positional table {self.max_len}")
            h = h + self.positional_embedding[:s]
        for block in self.blocks:
            h = block(h)
        if self.proj is not None:
            h = self.ln(self.proj(h))
        elif self.ln_f is not None:
            h = self.ln_f(h)
        post = h.detach().clone() if capture else None
        if squeeze:
            h = h.squeeze(0)
            if capture:
                pre, post = pre.squeeze(0), post.squeeze(0)
        if capture:
            return h, (pre, post)
        return h


@dataclass
class TrainableMask:
    """Per-parameter trainability flags plus total/trainable element counts."""

    flags: dict[str, bool]
    total: int
    trainable: int

    @classmethod
    def from_module(cls, module: nn.Module) -> "TrainableMask":
        flags, total, trainable = {}, 0, 0
        for name, param in module.named_parameters():
            flags[name] = bool(param.requires_grad)
            total += param.numel()
            if param.requires_grad:
                trainable += param.numel()
        return cls(flags=flags, total=total, trainable=trainable)


class LoRALinear(nn.Module):
    """Frozen base linear plus trainable low-rank delta (alpha/r) * B A."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, gen: torch.Generator):
        super().__init__()
        d_out, d_in = base.out_features, base.in_features
        if not 1 <= r <= min(d_out, d_in):
            raise ConfigurationError(f"lora rank {r} out of range [1, {min(d_out, d_in)}]")
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.scale = alpha / r
        self.lora_a = nn.Parameter(torch.empty(r, d_in).normal_(0.0, 0.02, generator=gen))
        self.lora_b = nn.Parameter(torch.zeros(d_out, r))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T * self.scale

    @property
    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_b @ self.lora_a)


def lora_wrap(base: nn.Linear, r: int, alpha: float, seed: int = 0) -> LoRALinear:
    gen = torch.Generator().manual_seed(seed)
    return LoRALinear(base, r, alpha, gen)


def apply_freeze_policy(backbone: nn.Module, policy: FreezePolicy | str | dict) -> TrainableMask:
    """Set requires_grad per the policy; lora additionally wraps q/v projections."""
    policy = FreezePolicy.parse(policy)
    params = list(backbone.named_parameters())
    if policy.kind == "none":
        for _, p in params:
            p.requires_grad_(True)
        return TrainableMask.from_module(backbone)
    if policy.kind == "full_freeze":
        for _, p in params:
            p.requires_grad_(False)
        return TrainableMask.from_module(backbone)
    if policy.kind == "layernorm_only":
        ln_modules = [m for m in backbone.modules() if isinstance(m, nn.LayerNorm)]
        positional = getattr(backbone, "positional_embedding", None)
        if not ln_modules and positional is None:
            raise ConfigurationError("layernorm_only: backbone has no LayerNorm or positional parameters")
        for _, p in params:
            p.requires_grad_(False)
        for m in ln_modules:
            for p in m.parameters():
                p.requires_grad_(True)
        if positional is not None:
            positional.requires_grad_(True)
        return TrainableMask.from_module(backbone)
    # lora
    attn_modules = [m for m in backbone.modules() if isinstance(m, SelfAttention)]
    if not attn_modules:
        raise ConfigurationError("lora: backbone has no attention projections to adapt")
    for _, p in params:
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(0)
    for m in attn_modules:
        m.q_proj = LoRALinear(m.q_proj, policy.r, policy.alpha, gen)
        m.v_proj = LoRALinear(m.v_proj, policy.r, policy.alpha, gen)
    return TrainableMask.from_module(backbone)


def build_variant(spec: VariantSpec, seq_len: int | None = None):
    """Construct a backbone for the spec, load its checkpoint if any, and apply
    the freeze policy.  Returns (backbone, mask)."""
    spec = VariantSpec.parse(spec)
    if seq_len is not None and seq_len > spec.max_len:
        spec = VariantSpec(
            kind=spec.kind, width=spec.width,
            depth=spec.depth if spec.kind in ("llm", "random") else None,
            heads=spec.heads if spec.kind not in ("linear", "nollm") else None,
            freeze_policy=spec.freeze_policy, mechanisms=spec.mechanisms,
            checkpoint=spec.checkpoint, seed=spec.seed, max_len=seq_len,
        )
    backbone = Backbone(spec)
    if spec.kind == "llm":
        from .checkpoints import load_into_backbone

        load_into_backbone(backbone, spec.checkpoint)
    mask = apply_freeze_policy(backbone, spec.freeze_policy)
    return backbone, mask


def forward(backbone: Backbone, tokens, capture: bool = False):
    """Functional forward; numpy in/out when given numpy, with optional snapshots."""
    if isinstance(tokens, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(tokens)).to(torch.float32)
        with torch.no_grad():
            if capture:
                out, (pre, post) = backbone(t, capture=True)
                return out.numpy().astype(np.float64), (
                    pre.numpy().astype(np.float64),
                    post.numpy().astype(np.float64),
                )
            return backbone(t).numpy().astype(np.float64)
    return backbone(tokens, capture=capture)


@dataclass
class PrototypeBank:
    """Text-token embedding rows used as prototype candidates."""

    vectors: np.ndarray  # M x D
    source: str = "seeded"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ConfigurationError("prototype bank must be a non-empty M x D matrix")
        if not np.isfinite(self.vectors).all():
            raise ConfigurationError("prototype bank contains non-finite rows")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def seeded(cls, m: int, d: int, seed: int = 0) -> "PrototypeBank":
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((m, d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(vectors=rows, source=f"seeded({seed})")

    @classmethod
    def from_checkpoint(cls, path) -> "PrototypeBank":
        from .checkpoints import load_checkpoint

        tensors = load_checkpoint(path)
        if "token_embedding" not in tensors:
            raise CheckpointError(f"{path}: checkpoint has no token_embedding vocabulary")
        return cls(vectors=tensors["token_embedding"], source=f"checkpoint:{path}")


def select_prototypes(ts_tokens, bank: PrototypeBank, k: int = PROTOTYPE_DEFAULT_K):
    """Top-K bank rows by mean scaled dot product with the TS tokens.

    Ties break toward the lower index.  Returns (K x D rows, indices).
    """
    if k > bank.size:
        raise ConfigurationError(f"requested K={k} prototypes from bank of {bank.size}")
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    tokens = ts_tokens.detach().cpu().numpy() if isinstance(ts_tokens, torch.Tensor) else np.asarray(ts_tokens)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    if tokens.shape[1] != bank.width:
        raise ConfigurationError(f"token width {tokens.shape[1]} != bank width {bank.width}")
    scores = tokens.mean(axis=0) @ bank.vectors.T / math.sqrt(bank.width)
    order = np.argsort(-scores, kind="stable")[:k]
    indices = order.astype(np.int64)
    return bank.vectors[indices].copy(), indices


class Mixer(nn.Module):
    """Two-stage fusion of [prototypes; TS tokens]: a token-mixing MLP shrinks
    the token axis to m, then a feature-mixing MLP fuses along D."""

    def __init__(self, spec: MixerSpec, n_tokens_in: int, width: int, seed: int = 0):
        super().__init__()
        if spec.m > n_tokens_in:
            raise ConfigurationError(f"mixer m={spec.m} exceeds input token count {n_tokens_in}")
        self.spec = spec
        self.n_tokens_in = n_tokens_in
        self.width = width
        gen = torch.Generator().manual_seed(seed)
        self.token_fc_in = nn.Linear(n_tokens_in, spec.token_hidden)
        self.token_fc_out = nn.Linear(spec.token_hidden, spec.m)
        self.feature_fc_in = nn.Linear(width, spec.feature_hidden)
        self.feature_fc_out = nn.Linear(spec.feature_hidden, width)
        for layer in (self.token_fc_in, self.token_fc_out, self.feature_fc_in, self.feature_fc_out):
            _init_linear(layer, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.n_tokens_in or x.shape[-1] != self.width:
            raise ConfigurationError(
                f"mixer expects {self.n_tokens_in} x {self.width} tokens, got {tuple(x.shape[-2:])}"
            )
        h = x.transpose(-1, -2)  # ... x D x (K+S)
        h = self.token_fc_out(F.gelu(self.token_fc_in(h)))  # ... x D x m
        h = h.transpose(-1, -2)  # ... x m x D
        return self.feature_fc_out(F.gelu(self.feature_fc_in(h)))


def mixer_fuse(prototypes, ts_tokens, mixer: Mixer) -> torch.Tensor:
    """Concatenate prototypes and TS tokens along the token axis and mix."""

    def to_tensor(a):
        if isinstance(a, torch.Tensor):
            return a
        return torch.from_numpy(np.ascontiguousarray(np.asarray(a, dtype=np.float64))).to(
            next(mixer.parameters()).dtype
        )

    p, t = to_tensor(prototypes), to_tensor(ts_tokens)
    if p.shape[-1] != t.shape[-1]:
        raise ConfigurationError(f"prototype width {p.shape[-1]} != token width {t.shape[-1]}")
    if p.dim() < t.dim():
        p = p.expand(*t.shape[:-2], *p.shape)
    return mixer(torch.cat([p, t], dim=-2))
