"""Deterministic, severity-parameterized image corruptions.

Every corruption draws its randomness from a counter-based generator
(Philox) keyed on ``(seed, image index, kind, severity)``, so any single
corrupted sample can be regenerated in isolation and the output bytes are
identical across runs, platforms, and thread counts.

The per-severity parameters live in a versioned JSON config shipped with
the package (``severity.json``); pass an alternative file to experiment,
and record its hash alongside any results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import OutOfRangeInputError, UnknownKindError

__all__ = [
    "CorruptionSpec",
    "SeverityConfig",
    "default_severity_config",
    "apply",
    "corrupt_dataset",
    "NOISE_KINDS",
    "ALL_KINDS",
]

NOISE_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise")


class SeverityConfig:
    """Parsed severity table: one parameter value per (kind, severity)."""

    def __init__(self, text: str, source: str = "<builtin>"):
        data = json.loads(text)
        self.version = int(data["version"])
        self.kinds = {}
        self.extras = {}
        for kind, entry in data["kinds"].items():
            levels = entry["levels"]
            if len(levels) != 5:
                raise ValueError(f"kind '{kind}' must define 5 severity levels")
            self.kinds[kind] = [float(v) for v in levels]
            self.extras[kind] = {k: float(v) for k, v in entry.get("extras", {}).items()}
        self.source = source
        self.sha256 = hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_file(cls, path) -> "SeverityConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls(f.read(), source=str(path))

    def level(self, kind: str, severity: int) -> float:
        if kind not in self.kinds:
            raise UnknownKindError(f"unknown corruption kind '{kind}'")
        if not 1 <= severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {severity}")
        return self.kinds[kind][severity - 1]

    def extra(self, kind: str, name: str, default: float) -> float:
        return self.extras.get(kind, {}).get(name, default)


_DEFAULT_CONFIG: SeverityConfig | None = None


def default_severity_config() -> SeverityConfig:
    global _DEFAULT_CONFIG
    if _DEFAULT_CONFIG is None:
        text = resources.files("dwcorr").joinpath("severity.json").read_text("utf-8")
        _DEFAULT_CONFIG = SeverityConfig(text)
    return _DEFAULT_CONFIG


ALL_KINDS = (
    "identity",
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "brightness",
    "contrast",
    "fog_haze",
    "motion_blur",
    "pixelate",
)


@dataclass(frozen=True)
class CorruptionSpec:
    """One (kind, severity, seed) cell of an evaluation suite."""

    kind: str
    severity: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise UnknownKindError(f"unknown corruption kind '{self.kind}'")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def _rng(spec: CorruptionSpec, index: int) -> np.random.Generator:
    tag = f"dwcorr-corrupt|{spec.seed}|{index}|{spec.kind}|{spec.severity}"
    key = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def _finish(out: np.ndarray) -> np.ndarray:
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _smooth_field(shape2d, rng) -> np.ndarray:
    # low-frequency cosine plume in [0, 1]
    h, w = shape2d
    fy, fx = rng.integers(1, 3, size=2)
    py, px = rng.uniform(0.0, 2 * np.pi, size=2)
    yy = np.cos(2 * np.pi * fy * np.arange(h) / h + py)
    xx = np.cos(2 * np.pi * fx * np.arange(w) / w + px)
    return 0.5 + 0.25 * yy[:, None] + 0.25 * xx[None, :]


def _shift_replicate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape[:2]
    yy = np.clip(np.arange(h) + dy, 0, h - 1)
    xx = np.clip(np.arange(w) + dx, 0, w - 1)
    return img[yy][:, xx]


def _block_reduce_axis(a: np.ndarray, factor: int, axis: int) -> np.ndarray:
    size = a.shape[axis]
    starts = np.arange(0, size, factor)
    sums = np.add.reduceat(a, starts, axis=axis)
    counts = np.minimum(starts + factor, size) - starts
    shape = [1] * a.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def apply(
    image,
    spec: CorruptionSpec,
    index: int = 0,
    config: SeverityConfig | None = None,
) -> np.ndarray:
    """Corrupt one image (values in [0,1], shape (H,W) or (H,W,C)).

    ``index`` is the sample's position in its dataset and is part of the
    random key, so tuple (seed, index, kind, severity) fully determines
    the output.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim not in (2, 3):
        raise OutOfRangeInputError(f"expected (H,W) or (H,W,C) image, got {img.shape}")
    if img.size == 0 or float(img.min()) < 0.0 or float(img.max()) > 1.0:
        raise OutOfRangeInputError("image values must lie in [0, 1]")

    if spec.kind == "identity":
        return img.copy()

    cfg = config or default_severity_config()
    p = cfg.level(spec.kind, spec.severity)
    rng = _rng(spec, index)
    spatial = img.shape[:2]

    if spec.kind == "gaussian_noise":
        return _finish(img + rng.normal(0.0, p, size=img.shape))

    if spec.kind == "shot_noise":
        # photon counting on top of a sensor dark level, subtracted back out
        dark = cfg.extra("shot_noise", "dark", 0.2)
        counts = rng.poisson((img.astype(np.float64) + dark) * p)
        return _finish(counts / p - dark)

    if spec.kind == "impulse_noise":
        # random-valued impulse model: hit pixels are replaced outright
        hit = rng.random(size=img.shape) < p
        values = rng.random(size=img.shape).astype(np.float32)
        return _finish(np.where(hit, values, img))

    if spec.kind == "brightness":
        return _finish(img + p)

    if spec.kind == "contrast":
        mean = float(np.mean(img, dtype=np.float64))
        return _finish((img - mean) * p + mean)

    if spec.kind == "fog_haze":
        depth = p * (0.6 + 0.4 * _smooth_field(spatial, rng))
        depth = np.clip(depth, 0.0, 1.0)
        if img.ndim == 3:
            depth = depth[:, :, None]
        return _finish(img * (1.0 - depth) + depth)

    if spec.kind == "motion_blur":
        length = int(p)
        theta = rng.uniform(0.0, np.pi)
        acc = np.zeros_like(img, dtype=np.float64)
        offsets = range(-(length // 2), length - length // 2)
        for k in offsets:
            dy = int(round(k * np.sin(theta)))
            dx = int(round(k * np.cos(theta)))
            acc += _shift_replicate(img, dy, dx)
        return _finish(acc / length)

    if spec.kind == "pixelate":
        f = int(p)
        blocks = _block_reduce_axis(img.astype(np.float64), f, axis=0)
        blocks = _block_reduce_axis(blocks, f, axis=1)
        up = np.repeat(np.repeat(blocks, f, axis=0), f, axis=1)
        return _finish(up[: spatial[0], : spatial[1]])

    raise UnknownKindError(f"unknown corruption kind '{spec.kind}'")


def corrupt_dataset(dataset, specs, config: SeverityConfig | None = None):
    """Lazily yield (kind, severity, corrupted image, label) over a suite.

    Iteration order is specs-major, then dataset order; each tuple is
    reproducible in isolation via :func:`apply` with the same index.
    """
    images, labels = dataset
    for spec in specs:
        for i in range(len(images)):
            yield (
                spec.kind,
                spec.severity,
                apply(images[i], spec, index=i, config=config),
                labels[i],
            )
