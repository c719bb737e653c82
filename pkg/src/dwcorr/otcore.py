"""Order-statistics primitives for 1D transport on activation vectors.

Everything here treats a layer's activations as an unweighted empirical
distribution: sort them, compare sorted vectors entry by entry, average
sorted vectors to get a barycenter. Payloads may be float32; all sums and
means accumulate in float64 so targets built from ~1e5-entry layers do not
drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyError,
    IndexOutOfRangeError,
    LengthMismatchError,
    NonFiniteError,
    ShapeMismatchError,
)

__all__ = [
    "SortedView",
    "TargetDistribution",
    "sort_with_indices",
    "center",
    "wasserstein_1d",
    "barycenter",
    "channel_dissimilarity",
]


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise EmptyError(f"{name} must have at least one element")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


@dataclass
class SortedView:
    """Ascending values of a vector plus the permutation that produced them.

    ``values[i] == original[indices[i]]`` for every rank i; ties keep their
    original relative order, so ``indices`` is deterministic.
    """

    values: np.ndarray
    indices: np.ndarray

    def restore(self) -> np.ndarray:
        """Scatter ``values`` back to original positions (inverse of the sort)."""
        out = np.empty_like(self.values)
        out[self.indices] = self.values
        return out


@dataclass
class TargetDistribution:
    """Per-layer correction target: the barycenter of centered training activations.

    ``t`` is sorted ascending and mean-zero (each contributing sample was
    centered before sorting). ``variance[i]`` is the population variance of
    the i-th order statistic across the contributing samples.
    """

    t: np.ndarray
    sample_count: int
    variance: np.ndarray
    layer_id: str = ""
    n: int = field(default=0)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.n == 0:
            self.n = int(self.t.size)
        self.validate()

    def validate(self):
        if self.t.size != self.n or self.variance.size != self.n:
            raise LengthMismatchError(
                f"target '{self.layer_id}': t/variance length != n ({self.n})"
            )
        if self.n == 0:
            raise EmptyError("target must have at least one entry")
        if self.sample_count < 1:
            raise EmptyError("target sample_count must be >= 1")
        if np.any(np.diff(self.t) < 0):
            raise ShapeMismatchError(f"target '{self.layer_id}': t is not sorted")
        scale = 1.0 + float(np.max(np.abs(self.t)))
        if abs(float(np.mean(self.t))) > 1e-5 * scale:
            raise ShapeMismatchError(
                f"target '{self.layer_id}': t is not mean-zero"
            )
        if np.any(self.variance < 0):
            raise ShapeMismatchError(
                f"target '{self.layer_id}': negative variance entry"
            )


def sort_with_indices(a) -> SortedView:
    """Sort a vector ascending, tracking where each rank came from.

    Ties break by ascending original index (stable sort), so the index
    permutation is identical across runs and platforms.
    """
    arr = _as_vector(a, "a")
    order = np.argsort(arr, kind="stable")
    return SortedView(values=arr[order], indices=order)


def center(a) -> np.ndarray:
    """Subtract the mean, computed in float64, from a vector.

    Returns an array of the input dtype for float inputs (float64 for
    integer inputs).
    """
    arr = _as_vector(a, "a")
    mean = float(np.mean(arr, dtype=np.float64))
    out = arr - np.asarray(mean, dtype=arr.dtype if arr.dtype.kind == "f" else np.float64)
    return out


def wasserstein_1d(a, b, r: float = 1.0) -> float:
    """Transport distance between two equal-size samples: (sum |a_(i)-b_(i)|^r)^(1/r).

    Both inputs are sorted internally, so the result is invariant under
    permutation of either argument. For r=1 this equals the minimum cost of
    any bijective matching between the two multisets.
    """
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.size != bv.size:
        raise LengthMismatchError(f"length mismatch: {av.size} vs {bv.size}")
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    diff = np.abs(
        np.sort(av).astype(np.float64, copy=False)
        - np.sort(bv).astype(np.float64, copy=False)
    )
    if r == 1:
        return float(np.sum(diff))
    return float(np.sum(diff**r) ** (1.0 / r))


def barycenter(samples, layer_id: str = "") -> TargetDistribution:
    """Average the order statistics of centered samples.

    Each sample is centered, then sorted; the target is the rank-wise mean
    and the variance profile is the rank-wise population variance around it.
    The average of sorted vectors is itself sorted, so no re-sort is needed.
    """
    if len(samples) == 0:
        raise EmptyError("barycenter needs at least one sample")
    first = _as_vector(samples[0], "samples[0]")
    n = first.size
    sum_sorted = np.zeros(n, dtype=np.float64)
    sorted_rows = []
    for k, s in enumerate(samples):
        v = _as_vector(s, f"samples[{k}]")
        if v.size != n:
            raise LengthMismatchError(
                f"samples[{k}] has length {v.size}, expected {n}"
            )
        row = np.sort(v.astype(np.float64, copy=False))
        row -= np.mean(row)
        sorted_rows.append(row)
        sum_sorted += row
    m = len(sorted_rows)
    t = sum_sorted / m
    variance = np.zeros(n, dtype=np.float64)
    for row in sorted_rows:
        variance += (t - row) ** 2
    variance /= m
    return TargetDistribution(t=t, sample_count=m, variance=variance, layer_id=layer_id)


def _channel_matrix(sample, k: int) -> list[np.ndarray]:
    channels = []
    for j, ch in enumerate(sample):
        channels.append(_as_vector(ch, f"sample[{k}] channel[{j}]"))
    return channels


def channel_dissimilarity(query_index: int, dataset_activations) -> int:
    """Index of the sample most dissimilar to the query, per summed channel transport.

    Each channel is sorted independently; the score of candidate m is
    sum_j sum_i |sorted(query)_j[i] - sorted(m)_j[i]|. The query itself is
    excluded; ties resolve to the lowest candidate index.
    """
    n_samples = len(dataset_activations)
    if not 0 <= query_index < n_samples:
        raise IndexOutOfRangeError(
            f"query_index {query_index} not in [0, {n_samples})"
        )
    if n_samples < 2:
        raise EmptyError("need at least one candidate besides the query")

    query = [np.sort(c) for c in _channel_matrix(dataset_activations[query_index], query_index)]
    n_channels = len(query)

    best_idx = -1
    best_score = -1.0
    for m in range(n_samples):
        if m == query_index:
            continue
        sample = _channel_matrix(dataset_activations[m], m)
        if len(sample) != n_channels:
            raise ShapeMismatchError(
                f"sample {m} has {len(sample)} channels, expected {n_channels}"
            )
        score = 0.0
        for j in range(n_channels):
            if sample[j].size != query[j].size:
                raise ShapeMismatchError(
                    f"sample {m} channel {j} has size {sample[j].size}, "
                    f"expected {query[j].size}"
                )
            score += float(
                np.sum(np.abs(query[j] - np.sort(sample[j])), dtype=np.float64)
            )
        if score > best_score:
            best_score = score
            best_idx = m
    return best_idx
