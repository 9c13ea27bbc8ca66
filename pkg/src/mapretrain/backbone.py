"""Hybrid SSM / attention encoder.

``M`` blocks are simplified Vim-style gated selective-scan blocks that read the
token sequence in a configurable scan order; ``T`` blocks are pre-norm
Transformer blocks. A pattern string such as ``"MMMTMMMT"`` fixes the stack.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .masking import ScanKind, scan_permutation
from .numerics import Tensor


class PatternError(ValueError):
    pass


class BlockKind(str, enum.Enum):
    MAMBA = "M"
    TRANSFORMER = "T"


@dataclass(frozen=True)
class BackbonePattern:
    blocks: tuple[BlockKind, ...]

    def __str__(self) -> str:
        return "".join(b.value for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


def parse_pattern(s: str) -> BackbonePattern:
    if not isinstance(s, str) or not re.fullmatch(r"[MT]+", s):
        raise PatternError(f"block pattern must match [MT]+, got {s!r}")
    return BackbonePattern(tuple(BlockKind(c) for c in s))


@dataclass(frozen=True)
class ScanOrder:
    kind: ScanKind
    rows: int
    cols: int
    perm: np.ndarray = field(repr=False, compare=False)
    inverse: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def make(cls, kind: ScanKind | str, rows: int, cols: int) -> "ScanOrder":
        perm = scan_permutation(rows, cols, kind)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return cls(ScanKind(kind), rows, cols, perm, inv)

    @property
    def is_identity(self) -> bool:
        return self.kind is ScanKind.ROW_FIRST or self.rows == 1 or self.cols == 1


def apply_scan_order(tokens: Tensor, order: ScanOrder) -> Tensor:
    """Reorder the token axis (-2) into scan order."""
    if tokens.shape[-2] != order.rows * order.cols:
        raise nx.DimensionError(f"{tokens.shape[-2]} tokens for a {order.rows}x{order.cols} grid")
    return nx.take(tokens, order.perm, axis=-2)


def undo_scan_order(tokens: Tensor, order: ScanOrder) -> Tensor:
    return nx.take(tokens, order.inverse, axis=-2)


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Holds Tensors and sub-modules; parameters are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_parameters(f"{key}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def _param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _linear_init(rng, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = _linear_init(rng, fan_in, fan_out)
        self.bias = _param(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


class SsmBlock(Module):
    """Pre-norm gated selective-scan block with a residual connection.

    in-proj -> [causal depthwise conv] -> SiLU -> selective scan (diagonal A,
    input-dependent delta, B, C) + skip -> gate by SiLU(z) -> out-proj.
    """

    def __init__(self, rng, dim: int, d_state: int = 8, expand: int = 2,
                 conv_kernel: int = 0, res_scale: float = 1.0):
        inner = expand * dim
        rank = max(1, math.ceil(dim / 16))
        self.norm = LayerNorm(dim)
        self.in_proj = Linear(rng, dim, inner, bias=False)
        self.gate_proj = Linear(rng, dim, inner, bias=False)
        if conv_kernel > 0:
            self.conv_weight = _param(rng.uniform(-1, 1, (conv_kernel, inner)) / math.sqrt(conv_kernel))
            self.conv_bias = _param(np.zeros(inner))
        else:
            self.conv_weight = self.conv_bias = None
        self.dt_down = Linear(rng, inner, rank, bias=False)
        self.dt_up = Linear(rng, rank, inner, bias=False)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=inner))
        self.dt_bias = _param(dt + np.log(-np.expm1(-dt)))      # softplus^-1(dt)
        self.b_proj = Linear(rng, inner, d_state, bias=False)
        self.c_proj = Linear(rng, inner, d_state, bias=False)
        self.a_log = _param(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1))))
        self.skip = _param(np.ones(inner))
        self.out_proj = Linear(rng, inner, dim, bias=False)
        self.res_scale = res_scale

    def mixer(self, x: Tensor) -> Tensor:
        """Block body on tokens already in scan order (no residual)."""
        h = self.norm(x)
        u = self.in_proj(h)
        z = self.gate_proj(h)
        if self.conv_weight is not None:
            u = nx.causal_conv1d(u, self.conv_weight, self.conv_bias)
        u = nx.silu(u)
        delta = nx.softplus(self.dt_up(self.dt_down(u)) + self.dt_bias)
        A = -nx.exp(self.a_log)
        y = nx.selective_scan(u, delta, A, self.b_proj(u), self.c_proj(u))
        y = (y + u * self.skip) * nx.silu(z)
        return self.out_proj(y)

    def __call__(self, x: Tensor, order: ScanOrder | None = None) -> Tensor:
        x, squeeze = _as_batch(x)
        if order is None or order.is_identity:
            out = self.mixer(x)
        else:
            out = undo_scan_order(self.mixer(apply_scan_order(x, order)), order)
        y = x + out * self.res_scale
        return nx.reshape(y, y.shape[1:]) if squeeze else y


class AttnBlock(Module):
    """Pre-norm multi-head self-attention + GELU MLP, both residual."""

    def __init__(self, rng, dim: int, heads: int = 2, mlp_ratio: float = 4.0):
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def attention(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, L, d = x.shape
        hd = d // self.heads

        def split(t):
            return nx.transpose(nx.reshape(t, (b, L, self.heads, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        if mask is None:
            mask = np.ones((L, L), dtype=bool)
        elif mask.ndim == 3:
            mask = mask[:, None]          # per-sample masks shared over heads
        p = nx.softmax_masked(scores, mask)
        o = nx.reshape(nx.transpose(p @ v, (0, 2, 1, 3)), (b, L, d))
        return self.proj(o)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x, squeeze = _as_batch(x)
        x = x + self.attention(self.norm1(x), mask)
        x = x + self.fc2(nx.gelu(self.fc1(self.norm2(x))))
        return nx.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderConfig:
    rows: int = 8
    cols: int = 8
    patch_dim: int = 16
    dim: int = 64
    pattern: str = "MMMTMMMT"
    scan_order: str = "row_first"
    d_state: int = 8
    expand: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    conv_kernel: int = 0


class HybridEncoder(Module):
    """Patch embedding, shared mask token, absolute positions, block stack."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pattern = parse_pattern(cfg.pattern)
        self.order = ScanOrder.make(cfg.scan_order, cfg.rows, cfg.cols)
        L = cfg.rows * cfg.cols
        self.patch_embed = Linear(rng, cfg.patch_dim, cfg.dim)
        self.mask_token = _param(rng.normal(0, 0.02, cfg.dim))
        self.pos_embed = _param(rng.normal(0, 0.02, (L, cfg.dim)))
        self.blocks = [
            SsmBlock(rng, cfg.dim, cfg.d_state, cfg.expand, cfg.conv_kernel)
            if kind is BlockKind.MAMBA else AttnBlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio)
            for kind in self.pattern.blocks
        ]
        self.norm = LayerNorm(cfg.dim)

    @property
    def length(self) -> int:
        return self.cfg.rows * self.cfg.cols

    def __call__(self, tokens, masked: np.ndarray | None = None) -> Tensor:
        """``tokens`` ``[B, L, P]`` (array or Tensor), ``masked`` ``[B, L]`` -> ``[B, L, D]``."""
        tokens = tokens if isinstance(tokens, Tensor) else nx.tensor(tokens)
        if tokens.ndim != 3 or tokens.shape[1:] != (self.length, self.cfg.patch_dim):
            raise nx.ContractError(f"encoder expects [B, {self.length}, {self.cfg.patch_dim}] "
                                   f"tokens, got {tokens.shape}")
        x = self.patch_embed(tokens)
        if masked is not None:
            masked = np.asarray(masked, dtype=bool)
            if masked.shape != tokens.shape[:2]:
                raise nx.ContractError(f"mask shape {masked.shape} does not match tokens "
                                       f"{tokens.shape[:2]}")
            x = nx.where(masked[..., None], self.mask_token, x)
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x, self.order) if isinstance(blk, SsmBlock) else blk(x)
        return self.norm(x)


class Classifier(Module):
    """Encoder + mean-pool over tokens + linear head."""

    def __init__(self, encoder: HybridEncoder, num_classes: int, rng: np.random.Generator):
        self.encoder = encoder
        self.head = Linear(rng, encoder.cfg.dim, num_classes)

    def features(self, tokens) -> Tensor:
        return nx.mean(self.encoder(tokens), axis=1)

    def __call__(self, tokens) -> Tensor:
        return self.head(self.features(tokens))
