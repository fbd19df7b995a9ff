"""Datasets: a synthetic Gaussian-blob image task and the CIFAR-10 binary format.

CIFAR-10 binary files are sequences of 3073-byte records: one label byte
(0-9) followed by 3072 pixel bytes holding the 32x32 red plane, then green,
then blue, each row-major.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
# Fixed per-channel normalization constants (CIFAR-10 training-set mean/std).
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: str | None = None
    num_classes: int = 4
    samples_per_class: int = 128
    val_per_class: int = 64
    image_dims: tuple[int, int, int] = (3, 16, 16)
    split_seed: int = 0
    separation: float = 1.0
    noise: float = 1.0

    def validate(self) -> list[str]:
        errs = []
        if self.kind not in ("synthetic", "cifar10_subset"):
            errs.append(f"dataset.kind: unknown kind {self.kind!r}")
        if self.kind == "cifar10_subset":
            if not self.path:
                errs.append("dataset.path: required for cifar10_subset")
            if tuple(self.image_dims) != IMAGE_SHAPE:
                errs.append(f"dataset.image_dims: cifar10_subset images are {list(IMAGE_SHAPE)}")
            if not 1 <= self.num_classes <= 10:
                errs.append("dataset.num_classes: must be in [1, 10] for cifar10_subset")
        if self.num_classes < 2 and self.kind == "synthetic":
            errs.append("dataset.num_classes: must be >= 2")
        if self.samples_per_class < 1:
            errs.append("dataset.samples_per_class: must be >= 1")
        if self.val_per_class < 1:
            errs.append("dataset.val_per_class: must be >= 1")
        if len(self.image_dims) != 3 or min(self.image_dims) < 1:
            errs.append("dataset.image_dims: must be three positive ints (C, H, W)")
        return errs


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def batches(self, batch_size: int, rng: np.random.Generator | None):
        n = len(self.x_train)
        order = np.arange(n) if rng is None else rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            yield self.x_train[idx], self.y_train[idx]


# ----------------------------------------------------------------------------
# synthetic
# ----------------------------------------------------------------------------


def _prototypes(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.image_dims
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((spec.num_classes, c, h, w))
    for k in range(spec.num_classes):
        for _ in range(2):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(0.15, 0.3) * min(h, w)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            protos[k] += rng.normal(0, 1, size=c)[:, None, None] * blob
    return protos


def make_synthetic(spec: DatasetSpec) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a prototype made of two randomly placed, randomly tinted
    Gaussian blobs; samples are ``separation * prototype + noise * N(0, 1)``.
    """
    rng = np.random.default_rng(spec.split_seed)
    protos = _prototypes(spec, rng)

    def draw(per_class):
        y = np.repeat(np.arange(spec.num_classes), per_class)
        x = spec.separation * protos[y] + spec.noise * rng.normal(size=(len(y),) + tuple(spec.image_dims))
        perm = rng.permutation(len(y))
        return x[perm], y[perm]

    xt, yt = draw(spec.samples_per_class)
    xv, yv = draw(spec.val_per_class)
    return Dataset(xt, yt, xv, yv, spec.num_classes, spec)


# ----------------------------------------------------------------------------
# CIFAR-10 binary
# ----------------------------------------------------------------------------


def decode_records(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode raw CIFAR-10 bytes into ``(labels uint8[N], pixels uint8[N, 3, 32, 32])``."""
    if len(buf) % RECORD_BYTES:
        n_full = len(buf) // RECORD_BYTES
        raise DataFormatError(
            f"truncated record at byte offset {n_full * RECORD_BYTES}: "
            f"file size {len(buf)} is not a multiple of {RECORD_BYTES}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].copy()
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"label byte {labels[i]} >= 10 at byte offset {i * RECORD_BYTES}")
    pixels = raw[:, 1:].reshape((-1,) + IMAGE_SHAPE).copy()
    return labels, pixels


def encode_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != RECORD_BYTES - 1:
        raise DataFormatError(f"expected {RECORD_BYTES - 1} pixel bytes per image, got {pixels.shape[1]}")
    return np.concatenate([labels, pixels], axis=1).tobytes()


def _cifar_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(path.glob("data_batch_*.bin")) + sorted(path.glob("test_batch.bin"))
    if not files:
        files = sorted(path.glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin files under {path}")
    return files


def normalize_cifar(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10_subset(path: str | os.PathLike, spec: DatasetSpec) -> Dataset:
    """Deterministic per-class subset of CIFAR-10 binary files.

    ``samples_per_class + val_per_class`` images per class are drawn with a
    generator seeded by ``spec.split_seed``; classes ``>= num_classes`` are
    ignored.
    """
    labels, pixels = [], []
    for f in _cifar_files(Path(path)):
        try:
            lab, pix = decode_records(f.read_bytes())
        except DataFormatError as e:
            raise DataFormatError(f"{f}: {e}") from None
        labels.append(lab)
        pixels.append(pix)
    lab = np.concatenate(labels)
    pix = np.concatenate(pixels)
    rng = np.random.default_rng(spec.split_seed)
    need = spec.samples_per_class + spec.val_per_class
    tr, va = [], []
    for k in range(spec.num_classes):
        idx = np.flatnonzero(lab == k)
        if len(idx) < need:
            raise DataFormatError(f"class {k} has {len(idx)} images, need {need}")
        idx = idx[rng.permutation(len(idx))[:need]]
        tr.append(idx[: spec.samples_per_class])
        va.append(idx[spec.samples_per_class :])
    tr_idx = np.sort(np.concatenate(tr))
    va_idx = np.sort(np.concatenate(va))
    x = normalize_cifar(pix)
    return Dataset(x[tr_idx], lab[tr_idx].astype(np.int64), x[va_idx], lab[va_idx].astype(np.int64),
                   spec.num_classes, spec)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        return make_synthetic(spec)
    return load_cifar10_subset(spec.path, spec)
