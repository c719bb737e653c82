"""Self-contained synthetic image set for exporter training runs.

Ten classes of smooth two-bump grayscale 16x16 images with mild
amplitude jitter and additive noise, quantized to u8. Class geometry is
fixed by an internal seed so every split shares the same templates;
pixels travel to the engine byte-exactly through IDX files.
"""

import numpy as np

GRID = 16
CLASSES = 10
_TEMPLATE_SEED = 1234


def _templates() -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_TEMPLATE_SEED))
    yy, xx = np.mgrid[0:GRID, 0:GRID].astype(np.float64) / (GRID - 1)
    out = []
    for _ in range(CLASSES):
        img = np.zeros((GRID, GRID))
        for _ in range(2):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            sig = rng.uniform(0.08, 0.2)
            amp = rng.uniform(0.6, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        out.append(img / img.max())
    return np.stack(out)


def shape_set(count: int, seed: int = 0):
    """Return (images u8 (count,16,16), labels i64 (count,))."""
    rng = np.random.Generator(np.random.PCG64(seed))
    templates = _templates()
    labels = rng.integers(0, CLASSES, size=count)
    amps = rng.uniform(0.7, 1.0, size=count)
    noise = rng.normal(0.0, 0.04, size=(count, GRID, GRID))
    imgs = templates[labels] * amps[:, None, None] + noise
    pixels = np.round(np.clip(imgs, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, labels.astype(np.int64)
