"""Datasets: IDX ingestion, binarization, synthetic manifolds, class subsampling."""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_ITEMS = 2**31 - 1


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, pixels] in [0, 1]
    image_side: int | None = None
    labels: np.ndarray | None = None
    intrinsic_dim: int | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2 or images.shape[0] < 1:
            raise ValueError(f"images must be a non-empty [N, pixels] matrix, got {images.shape}")
        if images.min() < 0 or images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        if self.image_side is None:
            side = math.isqrt(images.shape[1])
            if side * side == images.shape[1]:
                object.__setattr__(self, "image_side", side)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ValueError("labels must have one entry per image")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def pixels(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return replace(self, images=self.images[index], labels=labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what}: file shorter than the magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ITEMS:
        raise IdxDimensionError(f"{what}: dimensions {dims} overflow ({count} bytes)")
    if len(raw) < header + count:
        raise IdxTruncatedError(
            f"{what}: header declares {count} bytes of data, file holds {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX3 image file (and optional IDX1 labels); gzip is detected."""
    pix = _parse_idx(_open_bytes(images_path), IMAGES_MAGIC, 3, str(images_path))
    n, rows, cols = pix.shape
    images = pix.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_open_bytes(labels_path), LABELS_MAGIC, 1, str(labels_path))
        if labels.shape[0] != n:
            raise IdxDimensionError(f"{n} images but {labels.shape[0]} labels")
    side = rows if rows == cols else None
    return Dataset(images, image_side=side, labels=labels)


def write_idx(path, images: np.ndarray, labels_path=None, labels=None) -> None:
    """Write images ([N, rows, cols] uint8, or floats in [0,1]) as IDX3."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.floor(np.clip(images, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be [N, rows, cols]")
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    if labels_path is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def binarize(dataset: Dataset, mode: str = "threshold", seed: int | None = None) -> Dataset:
    """``threshold``: x >= 0.5 -> 1.  ``stochastic``: one Bernoulli(x) draw per pixel."""
    x = dataset.images
    if mode == "threshold":
        out = (x >= 0.5).astype(np.float64)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        out = (rng.random(x.shape) < x).astype(np.float64)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return replace(dataset, images=out)


@dataclass(frozen=True)
class SyntheticSpec:
    intrinsic_dim: int = 4
    ambient_dim: int = 784
    n_samples: int = 2000
    noise_sigma: float = 0.05
    seed: int = 0
    weight_scale: float = 2.0

    def __post_init__(self):
        if not 1 <= self.intrinsic_dim < self.ambient_dim:
            raise ValueError("need 1 <= intrinsic_dim < ambient_dim")
        if self.n_samples < 1 or self.noise_sigma < 0:
            raise ValueError("n_samples must be >= 1 and noise_sigma >= 0")


def synthetic_map(spec: SyntheticSpec) -> np.ndarray:
    """The fixed [k, D] linear map used by :func:`make_synthetic`."""
    rng = np.random.default_rng([spec.seed, 0])
    return spec.weight_scale * rng.standard_normal((spec.intrinsic_dim, spec.ambient_dim))


def synthetic_images(factors: np.ndarray, spec: SyntheticSpec,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    pre = factors @ synthetic_map(spec)
    x = 1.0 / (1.0 + np.exp(-pre))
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """k uniform factors -> fixed linear map -> sigmoid -> Gaussian noise -> clamp."""
    rng = np.random.default_rng([spec.seed, 1])
    factors = rng.uniform(-1.0, 1.0, size=(spec.n_samples, spec.intrinsic_dim))
    images = synthetic_images(factors, spec, rng)
    return Dataset(images, intrinsic_dim=spec.intrinsic_dim)


def subsample_per_class(dataset: Dataset, n_per_class: int, seed: int = 0) -> Dataset:
    if dataset.labels is None:
        raise ValueError("subsample_per_class needs labels")
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) > n_per_class:
            idx = np.sort(rng.choice(idx, size=n_per_class, replace=False))
        keep.append(idx)
    return dataset.subset(np.sort(np.concatenate(keep)))
