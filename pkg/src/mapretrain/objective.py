"""Row-wise masked autoregressive reconstruction head and loss.

The decoder is a small Transformer whose self-attention is restricted by a
visibility matrix. With the MAP matrix, the prediction for a masked token in
row ``i`` can only draw on encoder features of rows ``< i`` and of the visible
tokens in row ``i``, so one parallel pass computes every factor
``p(x_ij | visible part of r_i, r_<i)`` at once. The loss is mean squared error
on normalized pixels over masked tokens only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import ReconstructionTarget
from .backbone import AttnBlock, EncoderConfig, HybridEncoder, LayerNorm, Linear, Module
from .masking import (DecoderStrategy, MaskPlan, MaskStrategy, ScanKind, build_mask_plan,
                      round_half_up, visibility_batch)
from .numerics import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0


class Decoder(Module):
    def __init__(self, enc_dim: int, patch_dim: int, length: int, cfg: DecoderConfig,
                 rng: np.random.Generator):
        if cfg.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        self.cfg = cfg
        self.embed = Linear(rng, enc_dim, cfg.dim)
        self.pos_embed = Tensor(rng.normal(0, 0.02, (length, cfg.dim)), requires_grad=True)
        self.blocks = [AttnBlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(rng, cfg.dim, patch_dim)

    def __call__(self, enc: Tensor, allowed: np.ndarray, positions: np.ndarray | None = None
                 ) -> Tensor:
        """``enc`` ``[B, L', D_enc]`` -> pixel predictions ``[B, L', patch_dim]``.

        ``allowed`` is ``[L', L']`` or ``[B, L', L']``. ``positions`` selects which
        grid positions the ``L'`` tokens occupy (default: the first ``L'``).
        """
        n = enc.shape[-2]
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape[-2:] != (n, n):
            raise nx.ContractError(f"visibility {allowed.shape} does not fit {n} tokens")
        pos = self.pos_embed
        if positions is not None or n != pos.shape[0]:
            pos = nx.take(pos, np.arange(n) if positions is None else positions, axis=0)
        x = self.embed(enc) + pos
        for blk in self.blocks:
            x = blk(x, allowed)
        return self.head(self.norm(x))


class MapModel(Module):
    """Hybrid encoder + visibility-masked Transformer decoder."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, rng: np.random.Generator):
        self.encoder = HybridEncoder(enc_cfg, rng)
        self.decoder = Decoder(enc_cfg.dim, enc_cfg.patch_dim, enc_cfg.rows * enc_cfg.cols,
                               dec_cfg, rng)

    @property
    def grid(self) -> tuple[int, int]:
        return self.encoder.cfg.rows, self.encoder.cfg.cols

    def __call__(self, tokens, masked: np.ndarray, allowed: np.ndarray) -> Tensor:
        return decode(self.encoder(tokens, masked), masked, allowed, self.decoder)


def decode(enc: Tensor, masked: np.ndarray, allowed: np.ndarray, decoder: Decoder) -> Tensor:
    """Pixel predictions for every position; only masked ones are scored."""
    masked = np.asarray(masked, dtype=bool)
    L = enc.shape[-2]
    if masked.shape[-1] != L or np.asarray(allowed).shape[-1] != L:
        raise nx.ContractError(f"plan length {masked.shape[-1]} / visibility "
                               f"{np.asarray(allowed).shape} do not match {L} tokens")
    return decoder(enc, allowed)


@dataclass
class LossReport:
    loss: Tensor                 # differentiable scalar
    total: float                 # masked-token MSE
    per_row: np.ndarray          # [rows] MSE over each row's masked tokens (0 if none)
    row_counts: np.ndarray       # [rows] masked tokens per row
    count: int                   # masked tokens scored
    empty: bool = False

    def csv_fields(self) -> list[float]:
        return [self.total, *self.per_row.tolist()]


def map_loss(pred: Tensor, target: ReconstructionTarget | np.ndarray, masked: np.ndarray,
             cols: int) -> LossReport:
    """Mean squared error over masked tokens and pixel dims.

    ``pred``/``target`` are ``[..., L, D]``; ``masked`` is ``[..., L]``. Unmasked
    positions receive exactly zero gradient. An empty plan yields a zero loss
    with ``empty=True`` and a warning.
    """
    if isinstance(target, ReconstructionTarget):
        target = target.values
    target = np.asarray(target)
    masked = np.asarray(masked, dtype=bool)
    if pred.shape != target.shape or masked.shape != pred.shape[:-1]:
        raise nx.DimensionError(f"pred {pred.shape}, target {target.shape} and mask "
                                f"{masked.shape} disagree")
    L, D = pred.shape[-2:]
    rows = L // cols
    count = int(masked.sum())
    weight = np.broadcast_to(masked[..., None], pred.shape).astype(pred.dtype)
    sq = (pred - nx.tensor(target)) * weight
    sq = sq * sq
    if count == 0:
        warnings.warn("mask plan is empty; reconstruction loss defined as 0", stacklevel=2)
        zero = nx.sum(sq)
        return LossReport(zero, 0.0, np.zeros(rows), np.zeros(rows, dtype=np.int64), 0, True)
    loss = nx.sum(sq) * (1.0 / (count * D))
    err = sq.data.sum(axis=-1).reshape(-1, rows, cols).sum(axis=(0, 2))
    row_counts = masked.reshape(-1, rows, cols).sum(axis=(0, 2))
    per_row = np.divide(err, row_counts * D, out=np.zeros(rows), where=row_counts > 0)
    return LossReport(loss, float(loss.data), per_row, row_counts, count)


def teacher_forcing_equivalence(model: MapModel, tokens: np.ndarray, plan: MaskPlan,
                                allowed: np.ndarray | None = None) -> float:
    """Largest gap between parallel decoding and row-by-row decoding.

    (a) decodes all rows at once under ``allowed`` (default: the MAP matrix);
    (b) decodes row ``i`` from only the encoder features of rows ``0..i`` and the
    matching top-left block of ``allowed``. Returns ``max |a - b|`` over masked
    predictions.
    """
    rows, cols = model.grid
    masked = plan.flat()
    if allowed is None:
        allowed = visibility_batch(masked, rows, cols, DecoderStrategy.MAP)
    tokens = np.asarray(tokens)[None] if np.ndim(tokens) == 2 else np.asarray(tokens)
    with nx.no_grad():
        enc = model.encoder(tokens, masked[None])
        parallel = model.decoder(enc, allowed).data
        worst = 0.0
        for i in range(rows):
            if not masked[i * cols:(i + 1) * cols].any():
                continue
            n = (i + 1) * cols
            prefix = nx.take(enc, np.arange(n), axis=1)
            seq = model.decoder(prefix, allowed[:n, :n], np.arange(n)).data
            idx = i * cols + np.flatnonzero(masked[i * cols:n])
            worst = max(worst, float(np.abs(parallel[:, idx] - seq[:, idx]).max()))
    return worst


def pilot_ar_plan(rows: int, cols: int, masked_tokens: int | None = None,
                  ratio: float | None = None, order: ScanKind | str = ScanKind.ROW_FIRST
                  ) -> MaskPlan:
    """Suffix mask in autoregressive order: the last ``masked_tokens`` tokens."""
    L = rows * cols
    if masked_tokens is not None:
        if not 0 <= masked_tokens <= L:
            raise ValueError(f"cannot mask {masked_tokens} of {L} tokens")
        ratio = masked_tokens / L
    plan = build_mask_plan(rows, cols, ratio or 0.0, MaskStrategy.AR_SUFFIX, None, order)
    if masked_tokens is not None:
        assert plan.count == masked_tokens == round_half_up(ratio * L)
    return plan


def pilot_ar_objective(model: MapModel, tokens: np.ndarray, target: np.ndarray,
                       masked_tokens: int | None = None, ratio: float | None = None,
                       order: ScanKind | str = ScanKind.ROW_FIRST) -> LossReport:
    """Token-causal AR pretraining loss through the same decode/loss path.

    Visibility is causal in ``order`` and the masked tokens are the suffix of
    that order, so masking one token is next-token prediction and masking more
    turns it into causal inpainting.
    """
    rows, cols = model.grid
    plan = pilot_ar_plan(rows, cols, masked_tokens, ratio, order)
    tokens = np.asarray(tokens)
    masked = np.broadcast_to(plan.flat(), tokens.shape[:-1])
    allowed = visibility_batch(plan.flat(), rows, cols, DecoderStrategy.AR, order)
    pred = model(tokens, masked, allowed)
    return map_loss(pred, target, masked, cols)
