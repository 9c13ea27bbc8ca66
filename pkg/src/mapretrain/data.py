"""Images to token grids, normalized-pixel targets, synthetic data, archives."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

TARGET_EPS = 1e-6
ARCHIVE_MAGIC = b"MAPDATA1"
ARCHIVE_VERSION = 1


class TilingError(ValueError):
    """Image dimensions are not multiples of the patch size."""


class ArchiveError(IOError):
    code = "archive"


class BadMagicError(ArchiveError):
    code = "bad_magic"


class VersionMismatchError(ArchiveError):
    code = "version_mismatch"


class TruncatedArchiveError(ArchiveError):
    code = "truncated"


@dataclass(frozen=True)
class TokenGrid:
    """An image cut into an ``rows x cols`` grid of flattened patches.

    ``tokens[i * cols + j]`` holds the patch at grid position ``(i, j)``,
    flattened in (patch row, patch col, channel) order.
    """

    tokens: np.ndarray          # [rows * cols, patch_dim]
    rows: int
    cols: int
    patch: tuple[int, int]
    image_shape: tuple[int, int, int]   # C, H, W

    @property
    def patch_dim(self) -> int:
        return self.tokens.shape[-1]

    def row(self, i: int) -> np.ndarray:
        return self.tokens[i * self.cols:(i + 1) * self.cols]


@dataclass(frozen=True)
class ReconstructionTarget:
    values: np.ndarray   # [..., L, D] standardized pixels
    mean: np.ndarray     # [..., L, 1]
    std: np.ndarray      # [..., L, 1]

    def denormalize(self, values: np.ndarray | None = None) -> np.ndarray:
        values = self.values if values is None else values
        return values * (self.std + TARGET_EPS) + self.mean


@dataclass(frozen=True)
class DatasetRecord:
    label: int
    image: np.ndarray    # [C, H, W] float32 in [0, 1]


def patchify(image: np.ndarray, patch: tuple[int, int]) -> TokenGrid:
    image = np.asarray(image)
    if image.ndim != 3:
        raise TilingError(f"expected a C x H x W image, got shape {image.shape}")
    tokens = patchify_batch(image[None], patch)[0]
    c, h, w = image.shape
    ph, pw = patch
    return TokenGrid(tokens, h // ph, w // pw, (ph, pw), (c, h, w))


def patchify_batch(images: np.ndarray, patch: tuple[int, int]) -> np.ndarray:
    """``[B, C, H, W] -> [B, (H/ph)*(W/pw), ph*pw*C]``."""
    b, c, h, w = images.shape
    ph, pw = patch
    if ph <= 0 or pw <= 0 or h % ph or w % pw:
        raise TilingError(f"image {h}x{w} is not tiled by patch {ph}x{pw}")
    m, n = h // ph, w // pw
    x = images.reshape(b, c, m, ph, n, pw)
    x = x.transpose(0, 2, 4, 3, 5, 1)          # b, m, n, ph, pw, c
    return np.ascontiguousarray(x.reshape(b, m * n, ph * pw * c))


def unpatchify(grid: TokenGrid) -> np.ndarray:
    return unpatchify_batch(grid.tokens[None], grid.patch, grid.image_shape)[0]


def unpatchify_batch(tokens: np.ndarray, patch: tuple[int, int],
                     image_shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = image_shape
    ph, pw = patch
    b = tokens.shape[0]
    m, n = h // ph, w // pw
    x = tokens.reshape(b, m, n, ph, pw, c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, c, h, w))


def make_targets(tokens: TokenGrid | np.ndarray) -> ReconstructionTarget:
    """Standardize each token (patch) to zero mean and unit variance.

    ``target = (x - mean) / (std + 1e-6)``; constant patches map to zeros.
    """
    x = tokens.tokens if isinstance(tokens, TokenGrid) else np.asarray(tokens)
    if x.shape[-1] < 2:
        raise ValueError("normalized targets need patch_dim >= 2")
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return ReconstructionTarget(((x - mean) / (std + TARGET_EPS)).astype(x.dtype), mean, std)


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` pixels and crop back to the original size per image."""
    if pad <= 0:
        return images
    b, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    out = np.empty_like(images)
    for k, (dy, dx) in enumerate(offsets):
        out[k] = padded[k, :, dy:dy + h, dx:dx + w]
    return out


# ---------------------------------------------------------------------------
# synthetic classification data

FAMILIES = ("gradient", "checker", "blobs", "stripes")
PIXEL_NOISE = 0.0


def _render(family: int, variant: int, rng: np.random.Generator, h: int, w: int,
            noise: float = PIXEL_NOISE) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy / (h - 1), xx / (w - 1)
    if family == 0:
        # smooth linear ramp, orientation drawn from a class-specific quadrant
        theta = rng.uniform(0, np.pi / 2) + variant * np.pi / 2
        img = np.cos(theta) * xx + np.sin(theta) * yy
        img = (img - img.min()) / (np.ptp(img) + 1e-9)
        img = 0.15 + 0.7 * img
    elif family == 1:
        cell = int(rng.choice([4, 8])) * (variant + 1)
        oy, ox = rng.integers(0, cell, size=2)
        iy = (np.arange(h)[:, None] + oy) // cell
        ix = (np.arange(w)[None, :] + ox) // cell
        lo, hi = rng.uniform(0.05, 0.3), rng.uniform(0.7, 0.95)
        img = np.where((iy + ix) % 2 == 0, lo, hi)
    elif family == 2:
        img = np.full((h, w), 0.1)
        for _ in range(int(rng.integers(1, 4)) + 3 * variant):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            r = rng.uniform(0.06, 0.14)
            img += 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    else:
        period = rng.uniform(4, 7) / w
        theta = rng.uniform(np.pi / 3, 2 * np.pi / 3) + variant * np.pi / 6
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy)
                                 / period + phase)
    img = img + rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, count: int, num_classes: int = 4,
                  size: tuple[int, int, int] = (1, 32, 32),
                  noise: float = PIXEL_NOISE) -> Iterator[DatasetRecord]:
    """Procedural, class-balanced, seed-deterministic images in [0, 1].

    Class ``k`` uses pattern family ``k % 4`` (oriented ramps, checkerboards,
    Gaussian blobs, sinusoidal stripes) with variant ``k // 4``. Labels cycle
    ``0, 1, ..., num_classes - 1`` so any prefix is balanced to within one.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    c, h, w = size
    for idx in range(count):
        label = idx % num_classes
        rng = np.random.default_rng([seed, idx])
        chans = [_render(label % 4, label // 4, rng, h, w, noise) for _ in range(c)]
        yield DatasetRecord(label, np.stack(chans).astype(np.float32))


def synth_arrays(seed: int, count: int, num_classes: int = 4,
                 size: tuple[int, int, int] = (1, 32, 32),
                 noise: float = PIXEL_NOISE) -> tuple[np.ndarray, np.ndarray]:
    return stack_records(synth_dataset(seed, count, num_classes, size, noise))


def stack_records(records: Iterable[DatasetRecord]) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    if not records:
        return np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64)
    images = np.stack([r.image for r in records]).astype(np.float32)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# archive format: "MAPDATA1" | u32 version | u64 count | records
# record: u32 label | u32 C | u32 H | u32 W | C*H*W f32

_HEADER = struct.Struct("<8sIQ")
_RECORD = struct.Struct("<IIII")


def write_archive(path: str | Path, records: Iterable[DatasetRecord]) -> int:
    records = list(records)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(records)))
        for r in records:
            img = np.asarray(r.image, dtype="<f4")
            c, h, w = img.shape
            f.write(_RECORD.pack(r.label, c, h, w))
            f.write(img.tobytes(order="C"))
    return len(records)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedArchiveError(f"archive truncated while reading {what} "
                                    f"(wanted {n} bytes, got {len(buf)})")
    return buf


def iter_archive(path: str | Path) -> Iterator[DatasetRecord]:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < 8 or head[:8] != ARCHIVE_MAGIC:
            raise BadMagicError(f"{path}: not a MAPDATA1 archive")
        if len(head) != _HEADER.size:
            raise TruncatedArchiveError(f"{path}: header truncated")
        _, version, count = _HEADER.unpack(head)
        if version != ARCHIVE_VERSION:
            raise VersionMismatchError(f"{path}: archive version {version}, "
                                       f"expected {ARCHIVE_VERSION}")
        for k in range(count):
            label, c, h, w = _RECORD.unpack(_read_exact(f, _RECORD.size, f"record {k} header"))
            raw = _read_exact(f, 4 * c * h * w, f"record {k} pixels")
            image = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
            yield DatasetRecord(int(label), image)


def read_archive(path: str | Path) -> list[DatasetRecord]:
    return list(iter_archive(path))
