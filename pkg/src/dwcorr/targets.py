"""Streaming construction of per-layer correction targets.

A :class:`TargetAccumulator` keeps the running rank-wise sum (and sum of
squares) of centered, sorted activation vectors in float64. Accumulators
for disjoint shards of a dataset can be merged, so target building
parallelizes; :func:`finalize` turns one into a
:class:`~dwcorr.otcore.TargetDistribution`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyAccumulatorError,
    EmptyError,
    LayerMismatchError,
    LengthMismatchError,
    NonFiniteError,
)
from .otcore import TargetDistribution

__all__ = [
    "TargetAccumulator",
    "accumulate",
    "merge",
    "finalize",
    "build_targets",
]

log = logging.getLogger(__name__)


@dataclass
class TargetAccumulator:
    """Mergeable partial state for one layer's target distribution."""

    layer_id: str
    n: int
    sum_sorted: np.ndarray = field(default=None)
    sum_sq_sorted: np.ndarray = field(default=None)
    count: int = 0

    def __post_init__(self):
        if self.sum_sorted is None:
            self.sum_sorted = np.zeros(self.n, dtype=np.float64)
        if self.sum_sq_sorted is None:
            self.sum_sq_sorted = np.zeros(self.n, dtype=np.float64)
        if self.sum_sorted.size != self.n or self.sum_sq_sorted.size != self.n:
            raise LengthMismatchError("accumulator sums must have length n")


def accumulate(acc: TargetAccumulator, activation) -> TargetAccumulator:
    """Fold one activation vector (centered, then sorted) into the accumulator."""
    arr = np.asarray(activation).reshape(-1)
    if arr.size != acc.n:
        raise LengthMismatchError(
            f"activation length {arr.size} != accumulator n {acc.n}"
        )
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("activation contains NaN or Inf")
    row = np.sort(arr.astype(np.float64, copy=False))
    row -= np.mean(row)
    acc.sum_sorted += row
    acc.sum_sq_sorted += row * row
    acc.count += 1
    return acc


def merge(a: TargetAccumulator, b: TargetAccumulator) -> TargetAccumulator:
    """Combine two shards; commutative and associative, inputs untouched."""
    if a.layer_id != b.layer_id or a.n != b.n:
        raise LayerMismatchError(
            f"cannot merge '{a.layer_id}' (n={a.n}) with '{b.layer_id}' (n={b.n})"
        )
    return TargetAccumulator(
        layer_id=a.layer_id,
        n=a.n,
        sum_sorted=a.sum_sorted + b.sum_sorted,
        sum_sq_sorted=a.sum_sq_sorted + b.sum_sq_sorted,
        count=a.count + b.count,
    )


def finalize(acc: TargetAccumulator) -> TargetDistribution:
    """Turn the running sums into a target distribution.

    Variance uses the population form sum_sq/M - t^2; tiny negative values
    from cancellation are clamped to zero with a warning.
    """
    if acc.count < 1:
        raise EmptyAccumulatorError(f"accumulator '{acc.layer_id}' has no samples")
    m = acc.count
    t = acc.sum_sorted / m
    variance = acc.sum_sq_sorted / m - t * t
    worst = float(variance.min()) if variance.size else 0.0
    if worst < 0:
        log.warning(
            "clamping negative variance (min %.3e) for layer '%s'", worst, acc.layer_id
        )
        variance = np.maximum(variance, 0.0)
    return TargetDistribution(
        t=t, sample_count=m, variance=variance, layer_id=acc.layer_id
    )


def _iter_samples(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2:
        images = dataset[0]
        for i in range(len(images)):
            yield images[i]
        return
    if isinstance(dataset, np.ndarray):
        for row in dataset:
            yield row
        return
    for item in dataset:
        if isinstance(item, tuple):
            yield item[0]
        else:
            yield item


def build_targets(
    model,
    dataset,
    sites,
    subsample: int = 1,
    batch_size: int = 256,
) -> dict[str, TargetDistribution]:
    """Run the model over a dataset and build one target per tap site.

    ``dataset`` may be an array of inputs, an ``(inputs, labels)`` pair, or
    an iterable of inputs / ``(input, label)`` tuples. ``subsample`` keeps
    every k-th sample; the resulting sample count is recorded on each
    target via ``sample_count``.
    """
    from . import nn

    if subsample < 1:
        raise ValueError("subsample must be >= 1")
    sites = list(sites)
    if not sites:
        raise EmptyError("no target sites requested")
    accs: dict[str, TargetAccumulator] | None = None
    pending = []

    def flush(batch):
        nonlocal accs
        x = np.stack(batch)
        _, tapped = nn.forward(model, x, taps=set(sites))
        if accs is None:
            accs = {
                s: TargetAccumulator(layer_id=s, n=int(np.prod(tapped[s].shape[1:])))
                for s in sites
            }
        for s in sites:
            maps = tapped[s].reshape(len(batch), -1)
            for row in maps:
                accumulate(accs[s], row)

    kept = 0
    for i, sample in enumerate(_iter_samples(dataset)):
        if i % subsample != 0:
            continue
        kept += 1
        pending.append(np.asarray(sample))
        if len(pending) >= batch_size:
            flush(pending)
            pending = []
    if pending:
        flush(pending)
    if accs is None:
        raise EmptyError("dataset is empty")
    return {s: finalize(a) for s, a in accs.items()}
