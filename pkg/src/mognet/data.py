"""Dataset I/O, synthetic datasets, and input quantization.

Real image data is read and written in the CIFAR-10 binary batch layout:
3073-byte records of one label byte followed by 3x1024 channel-planar
pixel bytes.  The synthetic generators emit the same arrays, so every
code path downstream of loading is identical for real and synthetic
runs.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import DataError
from .quantizers import levels_of, round_half_away

RECORD_BYTES = 1 + 3 * 32 * 32


def load_image_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load labelled images from a record file or a directory of ``*.bin``
    files.  Returns (images uint8 (N, 3, 32, 32), labels int64 (N,))."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise DataError(f"no .bin record files in directory {path!r}")
    elif os.path.isfile(path):
        files = [path]
    else:
        raise DataError(f"dataset path {path!r} does not exist")
    blobs = []
    for f in files:
        with open(f, "rb") as fh:
            blob = fh.read()
        if len(blob) == 0 or len(blob) % RECORD_BYTES != 0:
            raise DataError(
                f"{f!r}: size {len(blob)} is not a positive multiple of {RECORD_BYTES}-byte records"
            )
        blobs.append(np.frombuffer(blob, dtype=np.uint8))
    raw = np.concatenate(blobs).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def save_image_records(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images/labels in the same record layout ``load_image_records`` reads."""
    n = images.shape[0]
    if images.shape != (n, 3, 32, 32) or images.dtype != np.uint8:
        raise DataError(f"expected uint8 (N, 3, 32, 32) images, got {images.dtype} {images.shape}")
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match {n} images")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("labels must fit in one byte")
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float64 in [0, 1]."""
    return images.astype(np.float64) / 255.0


def quantize_images(x: np.ndarray, k: int) -> np.ndarray:
    """Project [0, 1] pixels onto the k-bit level grid: round(x * (2^k - 1))
    saturated into [0, 2^k - 1], as int64 levels."""
    top = levels_of(k)
    x = np.asarray(x, dtype=np.float64)
    return np.clip(round_half_away(x * top), 0, top).astype(np.int64)


def _balanced_labels(samples: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(samples, dtype=np.int64) % classes
    return rng.permutation(labels)


def synthetic_two_class(samples: int, hw: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Linearly separable two-class set: class 0 is bright on top, class 1
    bright on the bottom, plus mild pixel noise.  Images float64 in [0, 1]."""
    if samples < 2:
        raise DataError(f"need at least 2 samples, got {samples}")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = _balanced_labels(samples, 2, rng)
    images = np.empty((samples, 3, hw, hw), dtype=np.float64)
    half = hw // 2
    images[labels == 0, :, :half, :] = 0.8
    images[labels == 0, :, half:, :] = 0.2
    images[labels == 1, :, :half, :] = 0.2
    images[labels == 1, :, half:, :] = 0.8
    images += 0.1 * rng.standard_normal(images.shape)
    return np.clip(images, 0.0, 1.0), labels


def synthetic_multiclass(
    samples: int, classes: int = 10, hw: int = 32, seed: int = 0, noise: float = 0.12
) -> tuple[np.ndarray, np.ndarray]:
    """Template-based multi-class set: each class is a fixed smooth random
    pattern (a coarse grid blown up to full resolution) plus pixel noise.
    Images float64 in [0, 1]."""
    if samples < classes:
        raise DataError(f"need at least {classes} samples for {classes} classes, got {samples}")
    if hw % 4 != 0:
        raise DataError(f"synthetic image size must divide by 4, got {hw}")
    rng = np.random.Generator(np.random.PCG64(seed))
    templates = rng.uniform(0.1, 0.9, size=(classes, 3, 4, 4))
    templates = np.kron(templates, np.ones((1, 1, hw // 4, hw // 4)))
    labels = _balanced_labels(samples, classes, rng)
    images = templates[labels] + noise * rng.standard_normal((samples, 3, hw, hw))
    return np.clip(images, 0.0, 1.0), labels
