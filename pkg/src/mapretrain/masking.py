"""Mask plans and decoder visibility matrices.

A *mask plan* says which grid tokens are hidden from the encoder, organized
per row. A *visibility matrix* says which key tokens each query token may
attend to inside the decoder. Four decoder strategies are supported:

``AR``        token-level causal in the autoregressive order
``MAE``       everything visible
``localMAE``  visibility confined to the query's own row
``MAP``       all earlier rows, plus the unmasked tokens of the query's own row
              (and the query itself)

``oracle_visibility`` recomputes every matrix entry from the set definitions
by direct enumeration and is only meant for tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class MaskStrategy(str, enum.Enum):
    RANDOM = "random"
    SEQUENTIAL = "sequential"
    DIAGONAL = "diagonal"
    AR_SUFFIX = "ar_suffix"


class DecoderStrategy(str, enum.Enum):
    AR = "AR"
    MAE = "MAE"
    LOCAL_MAE = "localMAE"
    MAP = "MAP"

    @classmethod
    def parse(cls, name: "str | DecoderStrategy") -> "DecoderStrategy":
        if isinstance(name, cls):
            return name
        key = str(name).replace("_", "").replace("-", "").lower()
        for s in cls:
            if s.value.lower() == key:
                return s
        raise ValueError(f"unknown decoder strategy {name!r}; "
                         f"expected one of {[s.value for s in cls]}")


class ScanKind(str, enum.Enum):
    ROW_FIRST = "row_first"
    COLUMN_FIRST = "column_first"


def scan_permutation(rows: int, cols: int, kind: ScanKind | str) -> np.ndarray:
    """``perm[k]`` is the row-major token index visited at scan step ``k``."""
    kind = ScanKind(kind)
    idx = np.arange(rows * cols).reshape(rows, cols)
    return (idx if kind is ScanKind.ROW_FIRST else idx.T).reshape(-1).copy()


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    rows: int
    cols: int
    masked: tuple[tuple[int, ...], ...]     # per-row sorted column indices
    ratio: float
    strategy: MaskStrategy
    seed: int | None = None

    @property
    def count(self) -> int:
        return sum(len(r) for r in self.masked)

    @property
    def length(self) -> int:
        return self.rows * self.cols

    def flat(self) -> np.ndarray:
        """Boolean ``[rows * cols]`` vector, True where masked."""
        out = np.zeros(self.length, dtype=bool)
        for i, cols in enumerate(self.masked):
            out[[i * self.cols + j for j in cols]] = True
        return out

    @classmethod
    def from_flat(cls, flat: np.ndarray, rows: int, cols: int,
                  strategy: MaskStrategy | str = MaskStrategy.RANDOM,
                  seed: int | None = None, ratio: float | None = None) -> "MaskPlan":
        flat = np.asarray(flat, dtype=bool).reshape(rows, cols)
        masked = tuple(tuple(int(j) for j in np.flatnonzero(r)) for r in flat)
        if ratio is None:
            ratio = float(flat.sum()) / (rows * cols)
        return cls(rows, cols, masked, ratio, MaskStrategy(strategy), seed)


def build_mask_plan(rows: int, cols: int, ratio: float,
                    strategy: MaskStrategy | str = MaskStrategy.RANDOM,
                    seed: int | None = 0,
                    order: ScanKind | str = ScanKind.ROW_FIRST) -> MaskPlan:
    """Choose ``round_half_up(ratio * rows * cols)`` tokens to hide.

    random      uniform without replacement over all positions
    sequential  a raster suffix of each row; the total is spread over rows as
                evenly as possible, earlier rows taking the remainder
    diagonal    whole wrapped diagonals ``(j - i) mod cols``, consecutive from a
                seed-chosen start, the last one filled in row order
    ar_suffix   the last tokens in the autoregressive ``order``
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    strategy = MaskStrategy(strategy)
    L = rows * cols
    k = round_half_up(ratio * L)
    flat = np.zeros(L, dtype=bool)
    if strategy is MaskStrategy.RANDOM:
        rng = np.random.default_rng(seed)
        flat[rng.choice(L, size=k, replace=False)] = True
    elif strategy is MaskStrategy.SEQUENTIAL:
        grid = flat.reshape(rows, cols)
        base, extra = divmod(k, rows)
        for i in range(rows):
            n = base + (1 if i < extra else 0)
            if n:
                grid[i, cols - n:] = True
    elif strategy is MaskStrategy.DIAGONAL:
        start = int(np.random.default_rng(seed).integers(cols)) if seed is not None else 0
        for d in range(cols):
            for i in range(rows):
                if flat.sum() == k:
                    break
                flat[i * cols + (i + start + d) % cols] = True
    else:
        perm = scan_permutation(rows, cols, order)
        flat[perm[L - k:]] = True
    return MaskPlan.from_flat(flat, rows, cols, strategy, seed, ratio=ratio)


@dataclass(frozen=True)
class VisibilityMatrix:
    allowed: np.ndarray      # [L, L] bool, (query, key)
    strategy: DecoderStrategy

    @property
    def length(self) -> int:
        return self.allowed.shape[0]

    def to_csv(self) -> str:
        return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in self.allowed)

    def to_pbm(self) -> str:
        """Plain (P1) bitmap; black pixels are allowed pairs."""
        lines = [f"P1\n{self.length} {self.length}"]
        lines += [" ".join("1" if v else "0" for v in row) for row in self.allowed]
        return "\n".join(lines) + "\n"


def visibility_batch(masked: np.ndarray, rows: int, cols: int,
                     strategy: DecoderStrategy | str,
                     order: ScanKind | str = ScanKind.ROW_FIRST,
                     self_visible: bool = True) -> np.ndarray:
    """Vectorized visibility for a batch of flat masks ``[..., L] -> [..., L, L]``."""
    strategy = DecoderStrategy.parse(strategy)
    masked = np.asarray(masked, dtype=bool)
    L = rows * cols
    if masked.shape[-1] != L:
        raise ValueError(f"mask length {masked.shape[-1]} does not match grid {rows}x{cols}")
    lead = masked.shape[:-1]
    row = np.arange(L) // cols
    if strategy is DecoderStrategy.MAE:
        return np.ones(lead + (L, L), dtype=bool)
    if strategy is DecoderStrategy.LOCAL_MAE:
        return np.broadcast_to(row[:, None] == row[None, :], lead + (L, L)).copy()
    if strategy is DecoderStrategy.AR:
        pos = np.empty(L, dtype=np.intp)
        pos[scan_permutation(rows, cols, order)] = np.arange(L)
        return np.broadcast_to(pos[None, :] <= pos[:, None], lead + (L, L)).copy()
    earlier = row[None, :] < row[:, None]
    same = row[None, :] == row[:, None]
    eye = np.eye(L, dtype=bool)
    key_visible = ~masked[..., None, :]
    allowed = earlier | (same & key_visible)
    if self_visible:
        allowed = allowed | eye
    else:
        # a query with nothing else to attend to keeps itself
        empty = ~allowed.any(axis=-1, keepdims=True)
        allowed = allowed | (eye & empty)
    return allowed


def build_visibility(plan: MaskPlan, strategy: DecoderStrategy | str,
                     order: ScanKind | str = ScanKind.ROW_FIRST,
                     self_visible: bool = True) -> VisibilityMatrix:
    strategy = DecoderStrategy.parse(strategy)
    allowed = visibility_batch(plan.flat(), plan.rows, plan.cols, strategy, order, self_visible)
    return VisibilityMatrix(allowed, strategy)


def oracle_visibility(plan: MaskPlan, strategy: DecoderStrategy | str,
                      order: ScanKind | str = ScanKind.ROW_FIRST,
                      self_visible: bool = True) -> VisibilityMatrix:
    """Entry-by-entry reference built from conditioning sets (slow)."""
    strategy = DecoderStrategy.parse(strategy)
    M, N = plan.rows, plan.cols
    cells = [(i, j) for i in range(M) for j in range(N)]
    hidden = {(i, j) for i in range(M) for j in plan.masked[i]}
    if ScanKind(order) is ScanKind.ROW_FIRST:
        ar_order = [(i, j) for i in range(M) for j in range(N)]
    else:
        ar_order = [(i, j) for j in range(N) for i in range(M)]
    rank = {cell: r for r, cell in enumerate(ar_order)}

    def conditioning(q):
        i, j = q
        if strategy is DecoderStrategy.MAE:
            return set(cells)
        if strategy is DecoderStrategy.LOCAL_MAE:
            return {(i, c) for c in range(N)}
        if strategy is DecoderStrategy.AR:
            return {cell for cell in cells if rank[cell] <= rank[q]}
        prev_rows = {(r, c) for r in range(i) for c in range(N)}
        visible_in_row = {(i, c) for c in range(N) if (i, c) not in hidden}
        ctx = prev_rows | visible_in_row
        if self_visible or not ctx:
            ctx.add(q)
        return ctx

    L = M * N
    allowed = np.zeros((L, L), dtype=bool)
    for qi, q in enumerate(cells):
        ctx = conditioning(q)
        for ki, k in enumerate(cells):
            allowed[qi, ki] = k in ctx
    return VisibilityMatrix(allowed, strategy)


def sample_plans(rows: int, cols: int, ratio: float, strategy: MaskStrategy | str,
                 rng: np.random.Generator, count: int,
                 order: ScanKind | str = ScanKind.ROW_FIRST) -> list[MaskPlan]:
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [build_mask_plan(rows, cols, ratio, strategy, int(s), order) for s in seeds]


def stack_flat(plans: Iterable[MaskPlan]) -> np.ndarray:
    return np.stack([p.flat() for p in plans])
