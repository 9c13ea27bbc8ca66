"""Flat ``key = value`` run configuration.

Files may group keys under ``[section]`` headers; sections are cosmetic and
every key is global. ``#`` starts a comment. An empty file gives the defaults.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .backbone import EncoderConfig, PatternError, parse_pattern
from .masking import DecoderStrategy, MaskStrategy, ScanKind
from .objective import DecoderConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _f(default, section: str, help: str):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class TrainConfig:
    # run
    mode: str = _f("pretrain", "run", "pretrain | finetune")
    seed: int = _f(0, "run", "seed for init, data order and masks")
    output_dir: str = _f("runs", "run", "where checkpoints and CSVs go")
    init_checkpoint: str = _f("", "run", "pretrained checkpoint for finetune ('' = from scratch)")
    # data
    data: str = _f("synthetic", "data", "'synthetic' or path to a dataset archive")
    num_images: int = _f(2000, "data", "synthetic dataset size")
    num_classes: int = _f(4, "data", "synthetic classes")
    image_size: int = _f(32, "data", "synthetic image height = width")
    channels: int = _f(1, "data", "synthetic image channels")
    data_seed: int = _f(1234, "data", "seed of the synthetic dataset itself")
    pixel_noise: float = _f(0.0, "data", "std of iid pixel noise in synthetic images")
    patch: int = _f(4, "data", "square patch side in pixels")
    holdout_frac: float = _f(0.2, "data", "held-out fraction for finetune evaluation")
    crop_pad: int = _f(0, "data", "random-crop padding in pixels (0 = off)")
    # model
    pattern: str = _f("MMMTMMMT", "model", "block pattern over {M, T}")
    scan_order: str = _f("row_first", "model", "SSM scan order: row_first | column_first")
    dim: int = _f(64, "model", "encoder width")
    d_state: int = _f(8, "model", "SSM state size")
    expand: int = _f(1, "model", "SSM inner width multiplier")
    heads: int = _f(2, "model", "attention heads")
    mlp_ratio: float = _f(2.0, "model", "Transformer MLP width multiplier")
    conv_kernel: int = _f(0, "model", "SSM causal conv kernel (0 = none)")
    dec_dim: int = _f(64, "model", "decoder width")
    dec_depth: int = _f(2, "model", "decoder Transformer blocks")
    dec_heads: int = _f(2, "model", "decoder attention heads")
    # objective
    decoder: str = _f("MAP", "objective", "decoder visibility: AR | MAE | localMAE | MAP")
    mask_strategy: str = _f("random", "objective", "random | sequential | diagonal | ar_suffix")
    mask_ratio: float = _f(0.5, "objective", "fraction of tokens masked, in [0, 1]")
    ar_order: str = _f("row_first", "objective", "AR order for AR visibility / ar_suffix masks")
    self_visible: bool = _f(True, "objective", "masked MAP queries attend to themselves")
    # optimization
    epochs: int = _f(30, "optim", "pretraining epochs")
    batch_size: int = _f(64, "optim", "batch size")
    lr: float = _f(1e-3, "optim", "pretraining peak learning rate")
    finetune_lr: float = _f(5e-4, "optim", "finetune peak learning rate")
    finetune_epochs: int = _f(10, "optim", "finetune epochs")
    freeze_backbone: bool = _f(False, "optim", "finetune only the linear head (probe)")
    weight_decay: float = _f(0.05, "optim", "decoupled weight decay (matrices only)")
    beta1: float = _f(0.9, "optim", "AdamW beta1")
    beta2: float = _f(0.999, "optim", "AdamW beta2")
    eps: float = _f(1e-8, "optim", "AdamW epsilon")
    warmup_frac: float = _f(0.05, "optim", "linear warmup as a fraction of total steps")
    clip_norm: float = _f(1.0, "optim", "global gradient-norm clip (0 = off)")
    max_skip_frac: float = _f(0.01, "optim", "max fraction of non-finite steps before failing")

    def __post_init__(self):
        self.validate()

    # -- derived ----------------------------------------------------------------
    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size // self.patch, self.image_size // self.patch

    def encoder_config(self, rows: int | None = None, cols: int | None = None,
                       channels: int | None = None) -> EncoderConfig:
        r, c = self.grid
        ch = self.channels if channels is None else channels
        return EncoderConfig(rows=rows or r, cols=cols or c, patch_dim=self.patch * self.patch * ch,
                             dim=self.dim, pattern=self.pattern, scan_order=self.scan_order,
                             d_state=self.d_state, expand=self.expand, heads=self.heads,
                             mlp_ratio=self.mlp_ratio, conv_kernel=self.conv_kernel)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(dim=self.dec_dim, depth=self.dec_depth, heads=self.dec_heads,
                             mlp_ratio=self.mlp_ratio)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- checks -----------------------------------------------------------------
    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        if self.mode not in ("pretrain", "finetune"):
            bad("mode", f"expected pretrain | finetune, got {self.mode!r}")
        try:
            parse_pattern(self.pattern)
        except PatternError as e:
            bad("pattern", str(e))
        for key, enum in (("scan_order", ScanKind), ("ar_order", ScanKind),
                          ("mask_strategy", MaskStrategy)):
            try:
                enum(getattr(self, key))
            except ValueError:
                bad(key, f"expected one of {[e.value for e in enum]}, got {getattr(self, key)!r}")
        try:
            DecoderStrategy.parse(self.decoder)
        except ValueError as e:
            bad("decoder", str(e))
        if not 0.0 <= self.mask_ratio <= 1.0:
            bad("mask_ratio", f"must lie in [0, 1], got {self.mask_ratio}")
        for key in ("lr", "finetune_lr"):
            if not (getattr(self, key) > 0 and math.isfinite(getattr(self, key))):
                bad(key, f"must be > 0, got {getattr(self, key)}")
        for key in ("holdout_frac", "warmup_frac", "max_skip_frac", "beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                bad(key, f"must lie in [0, 1), got {getattr(self, key)}")
        for key in ("num_images", "num_classes", "image_size", "channels", "patch", "dim",
                    "d_state", "expand", "heads", "dec_dim", "dec_depth", "dec_heads",
                    "batch_size"):
            if getattr(self, key) < 1:
                bad(key, f"must be >= 1, got {getattr(self, key)}")
        for key in ("epochs", "finetune_epochs", "crop_pad", "conv_kernel"):
            if getattr(self, key) < 0:
                bad(key, f"must be >= 0, got {getattr(self, key)}")
        if self.pixel_noise < 0:
            bad("pixel_noise", f"must be >= 0, got {self.pixel_noise}")
        if self.weight_decay < 0 or self.eps <= 0 or self.clip_norm < 0 or self.mlp_ratio <= 0:
            bad("optim", "weight_decay, clip_norm >= 0 and eps, mlp_ratio > 0 required")
        if self.image_size % self.patch:
            bad("patch", f"patch {self.patch} does not tile image_size {self.image_size}")
        if self.dim % self.heads:
            bad("heads", f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dec_dim % self.dec_heads:
            bad("dec_heads", f"dec_dim {self.dec_dim} is not divisible by {self.dec_heads}")


KEYS: dict[str, dataclasses.Field] = {f.name: f for f in fields(TrainConfig)}


def _parse_value(f: dataclasses.Field, raw: str) -> Any:
    kind = type(f.default)
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        return raw[1:-1]
    return raw


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str) and (v == "" or v != v.strip()):
        return f'"{v}"'
    return str(v)


def parse_overrides(pairs: dict[str, str], where: str = "override") -> dict[str, Any]:
    out = {}
    for key, raw in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r} in {where}; valid keys: {', '.join(KEYS)}",
                              key=key)
        try:
            out[key] = _parse_value(KEYS[key], raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}", key=key) from None
    return out


def loads_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]") or len(s) < 3:
                raise ConfigError(f"malformed section header {s!r}", n)
            continue
        if "=" not in s:
            raise ConfigError(f"expected key = value, got {s!r}", n)
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(KEYS)}", n, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", n, key)
        try:
            values[key] = _parse_value(KEYS[key], raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}", n, key) from None
        lines[key] = n
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except ConfigError as e:
        raise ConfigError(str(e), lines.get(e.key), e.key) from None


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return loads_config(Path(path).read_text(encoding="utf-8"), base)


def dumps_config(cfg: TrainConfig) -> str:
    out, section = [], None
    for f in fields(cfg):
        if f.metadata["section"] != section:
            section = f.metadata["section"]
            out.append(("\n" if out else "") + f"[{section}]")
        out.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(out) + "\n"


def to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def from_dict(d: dict[str, Any]) -> TrainConfig:
    unknown = set(d) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return TrainConfig(**d)


def help_text() -> str:
    """One line per key: name, default, description."""
    width = max(len(k) for k in KEYS)
    rows = []
    for f in fields(TrainConfig):
        rows.append(f"  {f.name:<{width}}  {_format_value(f.default):<12} {f.metadata['help']}")
    return "config keys (key = default):\n" + "\n".join(rows) + "\n"
