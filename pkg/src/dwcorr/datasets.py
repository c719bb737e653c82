"""Built-in desk-scale datasets: synthetic generators plus IDX loading.

The image generator draws each class as a fixed spatial template (a few
soft bumps on a dark background) with small per-sample jitter, amplitude
variation, and pixel noise. Templates depend only on the class and an
internal template seed, so every split and every seed sees the same ten
classes; the sample seed controls only the per-sample randomness. Images
are float32 in [0, 1], laid out (N, H, W, 1).
"""

from __future__ import annotations

import os

import numpy as np

from .errors import EmptyError, UnknownKindError

__all__ = [
    "feature_blobs",
    "image_blobs",
    "resolve_dataset",
    "DATA_DIR_ENV",
]

DATA_DIR_ENV = "DWCORR_DATA_DIR"

_TEMPLATE_SEED = 7
_CLASSES = 10
_SIZE = 16
_BUMPS = 3


def feature_blobs(n: int, classes: int = 2, dim: int = 8, separation: float = 4.0, seed: int = 0):
    """Gaussian clusters with unit noise and class centers ``separation`` apart.

    Returns (x (n, dim) f32, y (n,) i64). With separation >= 4 the classes
    are linearly separable with overwhelming probability.
    """
    if n < 1 or classes < 2 or dim < 1:
        raise EmptyError("feature_blobs needs n >= 1, classes >= 2, dim >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(size=(classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.normal(size=(n, dim))
    return x.astype(np.float32), y.astype(np.int64)


def _class_templates(size: int, classes: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_TEMPLATE_SEED))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.zeros((classes, size, size))
    for c in range(classes):
        img = np.zeros((size, size))
        for _ in range(_BUMPS):
            cy = rng.uniform(2.5, size - 3.5)
            cx = rng.uniform(2.5, size - 3.5)
            sig = rng.uniform(1.2, 2.2)
            amp = rng.uniform(0.55, 0.85)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        templates[c] = np.clip(img, 0.0, 0.9)
    return templates


def image_blobs(
    n: int,
    seed: int = 0,
    classes: int = _CLASSES,
    size: int = _SIZE,
    noise: float = 0.02,
    background: float = 0.0,
):
    """Synthetic image-classification set: jittered class templates plus noise.

    Returns (images (n, size, size, 1) f32 in [0,1], labels (n,) i64).
    Per-sample randomness: integer translation in {-1,0,1}^2, amplitude
    scale U(0.85, 1.15), additive Gaussian pixel noise. The background is
    dark and concentrated (negative noise clips to exact zeros), which
    keeps the lower order statistics of the pixel distribution tight.
    """
    if n < 1:
        raise EmptyError("image_blobs needs n >= 1")
    templates = _class_templates(size, classes)
    rng = np.random.Generator(np.random.PCG64(seed))
    y = rng.integers(0, classes, size=n)
    shifts = rng.integers(-1, 2, size=(n, 2))
    amps = rng.uniform(0.85, 1.15, size=n)
    pixel_noise = rng.normal(scale=noise, size=(n, size, size))
    images = np.empty((n, size, size), dtype=np.float64)
    for i in range(n):
        img = np.roll(templates[y[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = background + amps[i] * img + pixel_noise[i]
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return images[..., None], y.astype(np.int64)


_SPLIT_SEEDS = {"train": 1000, "test": 9000}


def resolve_dataset(name: str, split: str, count: int, seed: int = 0, data_dir: str | None = None):
    """Look up a dataset by CLI name; returns (images, labels).

    "synthetic-blobs" is generated on the fly (deterministic in split,
    count, seed). "mnist" reads the IDX pairs from ``data_dir`` (default:
    the DWCORR_DATA_DIR environment variable).
    """
    if split not in _SPLIT_SEEDS:
        raise UnknownKindError(f"unknown split '{split}' (train/test)")
    if name == "synthetic-blobs":
        return image_blobs(count, seed=_SPLIT_SEEDS[split] + seed)
    if name == "mnist":
        from .store import read_idx

        root = data_dir or os.environ.get(DATA_DIR_ENV, "")
        if not root:
            raise UnknownKindError(
                "mnist requires --data-dir or the DWCORR_DATA_DIR environment variable"
            )
        stem = "train" if split == "train" else "t10k"
        images, labels = read_idx(
            _find_idx(root, f"{stem}-images-idx3-ubyte"),
            _find_idx(root, f"{stem}-labels-idx1-ubyte"),
        )
        if count and count < len(images):
            images, labels = images[:count], labels[:count]
        return images[..., None], labels
    raise UnknownKindError(f"unknown dataset '{name}'")


def _find_idx(root: str, stem: str) -> str:
    for suffix in ("", ".gz"):
        path = os.path.join(root, stem + suffix)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")
