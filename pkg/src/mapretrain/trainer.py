"""Optimizer, schedule, checkpoints, and the pretrain / finetune / ablation runs."""

from __future__ import annotations

import contextlib
import csv
import io
import itertools
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .backbone import Classifier, HybridEncoder, Module
from .config import ConfigError, TrainConfig, dumps_config, from_dict, to_dict
from .data import make_targets, patchify_batch, random_crop, read_archive, stack_records, synth_arrays
from .masking import DecoderStrategy, sample_plans, stack_flat, visibility_batch
from .objective import MapModel, map_loss

log = logging.getLogger("mapretrain")


def emit(event: str, **fields: Any) -> None:
    """One structured ``key=value`` line per event."""
    parts = [f"event={event}"]
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        s = str(v)
        parts.append(f"{k}={json.dumps(s) if (' ' in s or '=' in s or not s) else s}")
    log.info(" ".join(parts))


class TrainingDiverged(nx.NumericError):
    pass


class IncompatibleCheckpointError(ValueError):
    def __init__(self, field_name: str, expected: Any, found: Any):
        self.field = field_name
        super().__init__(f"checkpoint is incompatible: {field_name} is {found!r} in the "
                         f"checkpoint but {expected!r} in the config")


def deterministic_requested() -> bool:
    return os.environ.get("MAP_DETERMINISTIC", "") == "1"


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    """Pin BLAS/OpenMP pools to one thread so reductions have a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, warmup: int, total: int, base: float) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then half-cosine to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    progress = (step - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                 lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 wd: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update with bias correction; ``t`` counts from 1. Pure function."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    theta = theta - lr * wd * theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta, m, v


def _decays(name: str, p: nx.Tensor) -> bool:
    # matrices only; biases, norms, scan parameters, tokens and positions are exempt
    return p.ndim >= 2 and not name.endswith(("a_log", "pos_embed"))


class AdamW:
    def __init__(self, params: dict[str, nx.Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0
        self.skipped = 0

    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad if p.grad is not None else np.zeros_like(p.data)
                for n, p in self.params.items()}

    def step(self, lr: float, grads: dict[str, np.ndarray] | None = None) -> bool:
        """Apply one update; a non-finite gradient skips the step and is counted."""
        grads = self.grads() if grads is None else grads
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        for n, p in self.params.items():
            wd = self.weight_decay if _decays(n, p) else 0.0
            p.data[...], self.m[n], self.v[n] = adamw_update(
                p.data, grads[n], self.m[n], self.v[n], self.t, lr, self.beta1, self.beta2,
                self.eps, wd)
        return True

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        out["t"] = np.array(self.t, dtype=np.int64)
        out["skipped"] = np.array(self.skipped, dtype=np.int64)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            for kind, store in (("m", self.m), ("v", self.v)):
                arr = tensors[f"{kind}.{n}"]
                if arr.shape != p.data.shape:
                    raise IncompatibleCheckpointError(f"{kind}.{n}", p.data.shape, arr.shape)
                store[n] = arr.astype(p.data.dtype)
        self.t = int(tensors["t"])
        self.skipped = int(tensors["skipped"])


def clip_grad_norm(params: dict[str, nx.Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"MAPCKPT1"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    rng_state: bytes
    version: int = CKPT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return from_dict(self.config)


def _write_tensors(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(struct.pack("<B", code))
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return b


def _read_tensors(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
        name = _read(f, nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", _read(f, 1, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim, "dims"))
        (code,) = struct.unpack("<B", _read(f, 1, "dtype"))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(_read(f, n, name), dtype=dt).reshape(dims).copy()
    return out


def pcg64_bytes(bitgen: np.random.PCG64) -> bytes:
    st = bitgen.state
    if st["has_uint32"]:
        raise CheckpointError("generator holds a buffered 32-bit draw; state is not 32 bytes")
    return st["state"]["state"].to_bytes(16, "little") + st["state"]["inc"].to_bytes(16, "little")


def pcg64_from_bytes(raw: bytes) -> np.random.Generator:
    if len(raw) != 32:
        raise CheckpointError(f"RNG state must be 32 bytes, got {len(raw)}")
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int.from_bytes(raw[:16], "little"),
                          "inc": int.from_bytes(raw[16:], "little")},
                "has_uint32": 0, "uinteger": 0}
    return np.random.Generator(bg)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", ckpt.version))
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    _write_tensors(buf, ckpt.tensors)
    _write_tensors(buf, ckpt.optimizer)
    buf.write(struct.pack("<Q", ckpt.step))
    if len(ckpt.rng_state) != 32:
        raise CheckpointError("RNG state must be 32 bytes")
    buf.write(ckpt.rng_state)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read(f, 8, "magic") != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        (clen,) = struct.unpack("<I", _read(f, 4, "config length"))
        config = json.loads(_read(f, clen, "config").decode("utf-8"))
        tensors = _read_tensors(f)
        optimizer = _read_tensors(f)
        (step,) = struct.unpack("<Q", _read(f, 8, "step"))
        rng = _read(f, 32, "rng state")
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(config, tensors, optimizer, step, rng, version)


def load_params(module: Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, p in module.named_parameters().items():
        key = prefix + name
        if key not in tensors:
            raise IncompatibleCheckpointError(key, "present", "missing")
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise IncompatibleCheckpointError(key, p.data.shape, arr.shape)
        p.data[...] = arr


# ---------------------------------------------------------------------------
# data


def load_images(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.data == "synthetic":
        size = (cfg.channels, cfg.image_size, cfg.image_size)
        return synth_arrays(cfg.data_seed, cfg.num_images, cfg.num_classes, size, cfg.pixel_noise)
    images, labels = stack_records(read_archive(cfg.data))
    if images.shape[0] == 0:
        raise OSError(f"{cfg.data}: archive holds no images")
    return images, labels


def _grid_of(cfg: TrainConfig, images: np.ndarray) -> tuple[int, int, int]:
    _, c, h, w = images.shape
    if h % cfg.patch or w % cfg.patch:
        raise ConfigError(f"patch {cfg.patch} does not tile {h}x{w} images", key="patch")
    return h // cfg.patch, w // cfg.patch, c


def _steps(n: int, batch: int, epochs: int) -> tuple[int, int]:
    per_epoch = max(1, math.ceil(n / batch))
    return per_epoch, per_epoch * epochs


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


_ENCODER_FIELDS = ("pattern", "scan_order", "dim", "d_state", "expand", "heads", "mlp_ratio",
                   "conv_kernel", "patch")


def check_compatible(cfg: TrainConfig, ckpt_cfg: dict[str, Any], image_shape: tuple) -> None:
    for name in _ENCODER_FIELDS:
        if ckpt_cfg.get(name) != getattr(cfg, name):
            raise IncompatibleCheckpointError(name, getattr(cfg, name), ckpt_cfg.get(name))


# ---------------------------------------------------------------------------
# pretraining


def metrics_header(rows: int) -> list[str]:
    return ["epoch", "step", "total_mse"] + [f"row_{i}" for i in range(rows)]


class Pretrainer:
    """Owns model, optimizer and RNG; advances one optimizer step at a time.

    Per-step randomness (crops, mask plans) comes from a child generator seeded
    by a 64-bit draw of the run generator, whose 32-byte PCG64 state is what a
    checkpoint stores. Epoch shuffles are a function of (seed, epoch), so a run
    can resume mid-epoch.
    """

    def __init__(self, cfg: TrainConfig, images: np.ndarray | None = None):
        self.cfg = cfg
        self.strategy = DecoderStrategy.parse(cfg.decoder)
        if images is None:
            images, _ = load_images(cfg)
        self.images = images
        self.rows, self.cols, self.channels = _grid_of(cfg, images)
        enc_cfg = cfg.encoder_config(self.rows, self.cols, self.channels)
        self.model = MapModel(enc_cfg, cfg.decoder_config(), np.random.default_rng([cfg.seed, 0]))
        self.params = self.model.named_parameters()
        self.opt = AdamW(self.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
        self.per_epoch, self.total = _steps(len(images), cfg.batch_size, cfg.epochs)
        self.warmup = round(cfg.warmup_frac * self.total)
        self.step = 0
        self._reset_epoch_sums()

    # -- state --------------------------------------------------------------------
    def _reset_epoch_sums(self) -> None:
        self.sse = 0.0
        self.row_sse = np.zeros(self.rows)
        self.row_count = np.zeros(self.rows, dtype=np.int64)

    def checkpoint(self) -> Checkpoint:
        opt = self.opt.state_tensors()
        opt["epoch.sse"] = np.array(self.sse)
        opt["epoch.row_sse"] = self.row_sse.copy()
        opt["epoch.row_count"] = self.row_count.copy()
        tensors = {n: p.data for n, p in self.params.items()}
        return Checkpoint(to_dict(self.cfg), tensors, opt, self.step, pcg64_bytes(self.rng.bit_generator))

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, ckpt: Checkpoint | str | Path, images: np.ndarray | None = None) -> "Pretrainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        self = cls(ckpt.train_config, images)
        load_params(self.model, ckpt.tensors)
        self.opt.load_state(ckpt.optimizer)
        self.sse = float(ckpt.optimizer["epoch.sse"])
        self.row_sse = ckpt.optimizer["epoch.row_sse"].astype(np.float64)
        self.row_count = ckpt.optimizer["epoch.row_count"].astype(np.int64)
        self.step = ckpt.step
        self.rng = pcg64_from_bytes(ckpt.rng_state)
        return self

    # -- training -----------------------------------------------------------------
    @property
    def epoch(self) -> int:
        return self.step // self.per_epoch

    @property
    def done(self) -> bool:
        return self.step >= self.total

    def batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.cfg
        order = _epoch_order(cfg.seed, self.epoch, len(self.images))
        b = self.step % self.per_epoch
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        x = random_crop(self.images[idx], cfg.crop_pad, rng)
        tokens = patchify_batch(x, (cfg.patch, cfg.patch))
        plans = sample_plans(self.rows, self.cols, cfg.mask_ratio, cfg.mask_strategy, rng,
                             len(idx), cfg.ar_order)
        return tokens, make_targets(tokens).values, stack_flat(plans)

    def train_step(self):
        if self.done:
            raise RuntimeError("training already finished")
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, int(self.rng.integers(0, 2**63 - 1))])
        tokens, target, masked = self.batch(rng)
        allowed = visibility_batch(masked, self.rows, self.cols, self.strategy, cfg.ar_order,
                                   cfg.self_visible)
        self.model.zero_grad()
        report = map_loss(self.model(tokens, masked, allowed), target, masked, self.cols)
        if not report.empty:
            nx.backward(report.loss)
        clip_grad_norm(self.params, cfg.clip_norm)
        lr = cosine_lr(self.step, self.warmup, self.total, cfg.lr)
        if not self.opt.step(lr):
            emit("skip_step", step=self.step, skipped=self.opt.skipped)
            if self.opt.skipped > cfg.max_skip_frac * self.total:
                raise TrainingDiverged(f"{self.opt.skipped} non-finite steps exceed "
                                       f"{cfg.max_skip_frac:.2%} of {self.total}", self.step)
        D = target.shape[-1]
        self.sse += report.total * report.count * D
        self.row_sse += report.per_row * report.row_counts * D
        self.row_count += report.row_counts
        self.step += 1
        return report

    def epoch_metrics(self) -> dict[str, Any]:
        D = self.model.encoder.cfg.patch_dim
        count = int(self.row_count.sum())
        total = self.sse / (count * D) if count else 0.0
        rows = np.divide(self.row_sse, self.row_count * D, out=np.zeros(self.rows),
                         where=self.row_count > 0)
        return {"epoch": self.epoch, "step": self.step, "total_mse": float(total),
                **{f"row_{i}": float(r) for i, r in enumerate(rows)}}

    def run(self, max_steps: int | None = None,
            on_epoch: Callable[[dict[str, Any]], None] | None = None) -> None:
        end = self.total if max_steps is None else min(self.total, self.step + max_steps)
        while self.step < end:
            self.train_step()
            if self.step % self.per_epoch == 0:
                row = self.epoch_metrics()
                self._reset_epoch_sums()
                emit("epoch", epoch=row["epoch"], step=row["step"], total_mse=row["total_mse"])
                if on_epoch:
                    on_epoch(row)


@dataclass
class PretrainResult:
    checkpoint: Path | None
    metrics: Path | None
    history: list[dict[str, Any]]
    skipped: int


def _format_row(row: dict[str, Any]) -> list[str]:
    return [repr(v) if isinstance(v, float) else str(v) for v in row.values()]


def pretrain(cfg: TrainConfig, out_dir: str | Path | None = None, images: np.ndarray | None = None,
             resume: str | Path | Checkpoint | None = None, max_steps: int | None = None
             ) -> PretrainResult:
    """Run (or continue) MAP pretraining; writes ``pretrain.ckpt`` and ``metrics.csv``."""
    with deterministic(deterministic_requested()):
        trainer = Pretrainer.resume(resume, images) if resume is not None else Pretrainer(cfg, images)
        cfg = trainer.cfg
        out = Path(out_dir) if out_dir is not None else None
        history: list[dict[str, Any]] = []
        writer = None
        fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(dumps_config(cfg))
            path = out / "metrics.csv"
            fresh = resume is None or not path.exists()
            fh = open(path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(metrics_header(trainer.rows))
                fh.flush()

        def on_epoch(row):
            history.append(row)
            if writer:
                writer.writerow(_format_row(row))
                fh.flush()

        emit("pretrain_start", seed=cfg.seed, steps=trainer.total, start=trainer.step,
             pattern=cfg.pattern, decoder=cfg.decoder, ratio=cfg.mask_ratio)
        try:
            trainer.run(max_steps, on_epoch)
        finally:
            if fh:
                fh.close()
        ckpt = None
        if out is not None:
            ckpt = out / "pretrain.ckpt"
            trainer.save(ckpt)
        emit("pretrain_done", step=trainer.step, skipped=trainer.opt.skipped,
             final_mse=history[-1]["total_mse"] if history else float("nan"))
        return PretrainResult(ckpt, out / "metrics.csv" if out else None, history,
                              trainer.opt.skipped)


# ---------------------------------------------------------------------------
# fine-tuning


def split_holdout(labels: np.ndarray, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class split so both parts stay balanced."""
    rng = np.random.default_rng([seed, 3])
    train, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(frac * len(idx)))
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


@dataclass
class FinetuneReport:
    accuracy: float                 # top-1 on held-out, in [0, 1]
    train_accuracy: float
    steps: int
    init: str
    history: list[dict[str, Any]] = field(default_factory=list)
    classifier: Classifier | None = field(default=None, repr=False)


def evaluate(model: Classifier, images: np.ndarray, labels: np.ndarray, patch: int,
             batch_size: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    correct = 0
    with nx.no_grad():
        for s in range(0, len(labels), batch_size):
            tokens = patchify_batch(images[s:s + batch_size], (patch, patch))
            pred = model(tokens).data.argmax(axis=-1)
            correct += int((pred == labels[s:s + batch_size]).sum())
    return correct / len(labels)


def finetune(cfg: TrainConfig, init: str | Path | Checkpoint | None = None,
             data: tuple[np.ndarray, np.ndarray] | None = None,
             out_dir: str | Path | None = None) -> FinetuneReport:
    """Mean-pool + linear head on the encoder, trained with cross-entropy.

    ``init=None`` trains from scratch; otherwise encoder weights come from a
    pretraining (or finetune) checkpoint whose architecture must match.
    With ``freeze_backbone`` only the head is trained (linear probe).
    """
    with deterministic(deterministic_requested()):
        images, labels = load_images(cfg) if data is None else data
        rows, cols, channels = _grid_of(cfg, images)
        num_classes = int(max(cfg.num_classes, labels.max() + 1))
        rng = np.random.default_rng([cfg.seed, 4])
        encoder = HybridEncoder(cfg.encoder_config(rows, cols, channels), rng)
        model = Classifier(encoder, num_classes, rng)
        init_name = "scratch"
        if init is not None and init != "":
            ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
            check_compatible(cfg, ckpt.config, images.shape)
            load_params(encoder, ckpt.tensors, "encoder.")
            init_name = str(init) if not isinstance(init, Checkpoint) else "checkpoint"

        train_idx, held_idx = split_holdout(labels, cfg.holdout_frac, cfg.data_seed)
        trainable = model.head.named_parameters("head.") if cfg.freeze_backbone \
            else model.named_parameters()
        opt = AdamW(trainable, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        per_epoch, total = _steps(len(train_idx), cfg.batch_size, cfg.finetune_epochs)
        warmup = round(cfg.warmup_frac * total)
        history = []
        emit("finetune_start", seed=cfg.seed, init=init_name, steps=total,
             frozen=cfg.freeze_backbone, train=len(train_idx), held_out=len(held_idx))
        step = 0
        for epoch in range(cfg.finetune_epochs):
            order = train_idx[_epoch_order(cfg.seed + 7919, epoch, len(train_idx))]
            loss_sum, seen = 0.0, 0
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                crop_rng = np.random.default_rng([cfg.seed, 5, step])
                x = random_crop(images[idx], cfg.crop_pad, crop_rng)
                tokens = patchify_batch(x, (cfg.patch, cfg.patch))
                model.zero_grad()
                if cfg.freeze_backbone:
                    with nx.no_grad():
                        feats = model.features(tokens)
                    logits = model.head(nx.tensor(feats.data))
                else:
                    logits = model(tokens)
                loss = nx.cross_entropy(logits, labels[idx])
                nx.backward(loss)
                clip_grad_norm(trainable, cfg.clip_norm)
                if not opt.step(cosine_lr(step, warmup, total, cfg.finetune_lr)):
                    if opt.skipped > cfg.max_skip_frac * total:
                        raise TrainingDiverged(f"{opt.skipped} non-finite finetune steps", step)
                loss_sum += float(loss.data) * len(idx)
                seen += len(idx)
                step += 1
            history.append({"epoch": epoch + 1, "step": step, "loss": loss_sum / max(seen, 1)})
            emit("finetune_epoch", epoch=epoch + 1, loss=history[-1]["loss"])
        acc = evaluate(model, images[held_idx], labels[held_idx], cfg.patch)
        train_acc = evaluate(model, images[train_idx], labels[train_idx], cfg.patch)
        emit("finetune_done", accuracy=acc, train_accuracy=train_acc)
        report = FinetuneReport(acc, train_acc, step, init_name, history, model)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(dumps_config(cfg))
            tensors = {n: p.data for n, p in model.named_parameters().items()}
            save_checkpoint(out / "finetune.ckpt", Checkpoint(
                to_dict(cfg.replace(mode="finetune")), tensors, opt.state_tensors(), step,
                pcg64_bytes(np.random.PCG64([cfg.seed, 4]))))
            (out / "report.json").write_text(json.dumps(
                {"accuracy": acc, "train_accuracy": train_acc, "steps": step, "init": init_name,
                 "history": history}, indent=2) + "\n")
        return report


def load_classifier(ckpt: Checkpoint | str | Path, image_shape: tuple[int, int, int] | None = None
                    ) -> tuple[Classifier, TrainConfig]:
    """Rebuild a finetuned classifier from its checkpoint."""
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    cfg = ckpt.train_config
    if "head.weight" not in ckpt.tensors:
        raise IncompatibleCheckpointError("head.weight", "present", "missing (not a finetune checkpoint)")
    c, h, w = image_shape or (cfg.channels, cfg.image_size, cfg.image_size)
    encoder = HybridEncoder(cfg.encoder_config(h // cfg.patch, w // cfg.patch, c),
                            np.random.default_rng(0))
    model = Classifier(encoder, ckpt.tensors["head.weight"].shape[1], np.random.default_rng(0))
    load_params(model, ckpt.tensors)
    return model, cfg


# ---------------------------------------------------------------------------
# ablation grids

NAMED_GRIDS: dict[str, list[tuple[str, dict[str, Any]]]] = {
    "decoder_mask": [(s.value, {"decoder": s.value}) for s in DecoderStrategy],
    "mask_strategy": [(s, {"mask_strategy": s}) for s in ("random", "sequential", "diagonal")],
    "mask_ratio": [(f"ratio={r}", {"mask_ratio": r}) for r in (0.25, 0.5, 0.75)],
    "scan_order": [(f"scan={s},ar={a}", {"scan_order": s, "ar_order": a, "decoder": "AR",
                                         "mask_strategy": "ar_suffix"})
                   for s in ("row_first", "column_first") for a in ("row_first", "column_first")],
    "ar_ratio": [(f"ar_ratio={r}", {"decoder": "AR", "mask_strategy": "ar_suffix", "mask_ratio": r})
                 for r in (0.0, 0.25, 0.5, 0.75)],
    "pattern": [(p, {"pattern": p}) for p in ("MMMMMMMM", "MMMTMMMT", "MTMTMTMT", "TTTTTTTT")],
}


def parse_grid(spec: str) -> list[tuple[str, dict[str, Any]]]:
    """A named grid, or ``key=v1,v2;key2=a,b`` expanded as a cartesian product.

    The empty string is the empty grid.
    """
    from .config import parse_overrides

    spec = spec.strip()
    if spec in NAMED_GRIDS:
        return list(NAMED_GRIDS[spec])
    if not spec:
        return []
    axes = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid axis {part!r} must look like key=v1,v2 "
                              f"(or use one of {sorted(NAMED_GRIDS)})")
        key, values = (s.strip() for s in part.split("=", 1))
        axes.append([(key, v.strip()) for v in values.split(",") if v.strip()])
    cells = []
    for combo in itertools.product(*axes):
        overrides = parse_overrides(dict(combo), "grid")
        cells.append((",".join(f"{k}={v}" for k, v in combo), overrides))
    return cells


RESULT_COLUMNS = ["cell", "status", "final_mse", "epoch1_mse", "accuracy", "seconds", "error"]


def run_ablation_grid(base: TrainConfig, grid: list[tuple[str, dict[str, Any]]],
                      out_csv: str | Path, work_dir: str | Path | None = None,
                      finetune_cells: bool = True,
                      data: tuple[np.ndarray, np.ndarray] | None = None) -> list[dict[str, Any]]:
    """Pretrain (and optionally finetune) every cell with the same seeds.

    Cells pretrain on the training split only.

    A failing cell is recorded with ``status=error`` and the grid continues.
    """
    import time

    keys = sorted({k for _, o in grid for k in o})
    header = ["cell"] + keys + RESULT_COLUMNS[1:]
    data = load_images(base) if data is None and grid else data
    results = []
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, header, lineterminator="\n")
        writer.writeheader()
        for name, overrides in grid:
            row: dict[str, Any] = {"cell": name, **{k: overrides.get(k, getattr(base, k)) for k in keys}}
            t0 = time.perf_counter()
            try:
                cfg = base.replace(**overrides)
                cell_dir = Path(work_dir) / _slug(name) if work_dir else None
                # held-out images stay unseen until the finetune evaluation
                train_idx, _ = split_holdout(data[1], cfg.holdout_frac, cfg.data_seed)
                pre = pretrain(cfg, cell_dir, images=data[0][train_idx])
                row.update(status="ok", final_mse=pre.history[-1]["total_mse"] if pre.history else "",
                           epoch1_mse=pre.history[0]["total_mse"] if pre.history else "")
                if finetune_cells:
                    ckpt = pre.checkpoint
                    if ckpt is None:
                        raise RuntimeError("finetuning a cell needs a work directory")
                    rep = finetune(cfg.replace(mode="finetune"), ckpt, data)
                    row["accuracy"] = rep.accuracy
            except Exception as e:              # noqa: BLE001  per-cell failures are data
                row.update(status="error", error=f"{type(e).__name__}: {e}")
                emit("cell_failed", cell=name, error=type(e).__name__)
            row["seconds"] = round(time.perf_counter() - t0, 3)
            results.append(row)
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            fh.flush()
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
