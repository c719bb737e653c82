"""Corruption-suite evaluation, mCE, and correction-overhead benchmarking.

A suite pairs a clean test set with a list of corruption specs. For each
spec every sample is corrupted once and pushed through both the plain
and the corrected model, so the two accuracy columns always describe the
same bytes. Work is split into fixed batches whose integer correct-counts
are summed in batch order; thread count therefore cannot change any
reported accuracy, only the wallclock columns.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corruption import CorruptionSpec, SeverityConfig, apply, default_severity_config
from .errors import EmptySuiteError, MissingBaselineError
from .nn import Model, forward

__all__ = [
    "EvalRow",
    "EvalReport",
    "SweepResult",
    "run_suite",
    "compute_mce",
    "bench_correction",
    "fit_nlogn_exponent",
]


@dataclass(frozen=True)
class EvalRow:
    kind: str
    severity: int
    n_samples: int
    accuracy_uncorrected: float
    accuracy_corrected: float
    ms_per_sample_uncorrected: float
    ms_per_sample_corrected: float

    def __post_init__(self):
        if self.n_samples < 1:
            raise EmptySuiteError("evaluation row with no samples")
        for acc in (self.accuracy_uncorrected, self.accuracy_corrected):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")


@dataclass
class EvalReport:
    rows: list
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rows:
            raise EmptySuiteError("report has no rows")
        if not self.summary:
            self.summary = {
                "mean_accuracy_uncorrected": float(
                    np.mean([r.accuracy_uncorrected for r in self.rows])
                ),
                "mean_accuracy_corrected": float(
                    np.mean([r.accuracy_corrected for r in self.rows])
                ),
            }


@dataclass
class SweepResult:
    """Grid of (lambda1, lambda2, n_iter) -> mean corrected accuracy."""

    entries: list  # of (lambda1, lambda2, n_iter, mean_corrected_accuracy)
    baseline_niter0: float


def _batch_eval(model: Model, corrected: Model | None, images: np.ndarray):
    t0 = time.perf_counter()
    logits, _ = forward(model, images)
    t1 = time.perf_counter()
    preds = np.argmax(logits, axis=1)
    if corrected is None:
        return preds, preds, t1 - t0, t1 - t0
    t2 = time.perf_counter()
    logits_c, _ = forward(corrected, images)
    t3 = time.perf_counter()
    return preds, np.argmax(logits_c, axis=1), t1 - t0, t3 - t2


def run_suite(
    model: Model,
    corrected: Model | None,
    dataset,
    specs,
    config: SeverityConfig | None = None,
    threads: int = 1,
    batch_size: int = 64,
) -> EvalReport:
    """Evaluate every corruption spec over the full test set.

    ``corrected`` is the retrofit model (None evaluates the plain model
    twice, making both columns equal). Corruption of sample i under a spec
    depends only on (spec, i), never on batching or threads.
    """
    images, labels = dataset
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    specs = list(specs)
    if not specs:
        raise EmptySuiteError("no corruption specs given")
    if len(images) == 0:
        raise EmptySuiteError("empty test set")
    config = config or default_severity_config()

    def corrupt_batch(spec: CorruptionSpec, lo: int, hi: int) -> np.ndarray:
        return np.stack(
            [apply(images[i], spec, index=i, config=config) for i in range(lo, hi)]
        )

    def eval_chunk(spec: CorruptionSpec, lo: int, hi: int):
        batch = corrupt_batch(spec, lo, hi)
        pu, pc, tu, tc = _batch_eval(model, corrected, batch)
        ok_u = int(np.sum(pu == labels[lo:hi]))
        ok_c = int(np.sum(pc == labels[lo:hi]))
        return ok_u, ok_c, tu, tc

    rows = []
    ranges = [(lo, min(lo + batch_size, len(images))) for lo in range(0, len(images), batch_size)]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for spec in specs:
            if pool is not None:
                results = list(pool.map(lambda r: eval_chunk(spec, *r), ranges))
            else:
                results = [eval_chunk(spec, *r) for r in ranges]
            ok_u = sum(r[0] for r in results)
            ok_c = sum(r[1] for r in results)
            tu = sum(r[2] for r in results)
            tc = sum(r[3] for r in results)
            n = len(images)
            rows.append(
                EvalRow(
                    kind=spec.kind,
                    severity=spec.severity,
                    n_samples=n,
                    accuracy_uncorrected=ok_u / n,
                    accuracy_corrected=ok_c / n,
                    ms_per_sample_uncorrected=1000.0 * tu / n,
                    ms_per_sample_corrected=1000.0 * tc / n,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return EvalReport(rows=rows)


def compute_mce(report: EvalReport, baseline_errors: dict, column: str = "corrected") -> float:
    """Mean corruption error in percent against a per-(kind, severity) baseline.

    For each non-identity kind, sum this report's error rates over its
    severities and divide by the baseline's sum over the same cells; the
    mCE is the mean of those ratios times 100.
    """
    attr = f"accuracy_{column}"
    by_kind: dict = {}
    for row in report.rows:
        if row.kind == "identity":
            continue
        key = (row.kind, row.severity)
        if key not in baseline_errors:
            raise MissingBaselineError(f"no baseline error for {key}")
        base = float(baseline_errors[key])
        if base <= 0:
            raise MissingBaselineError(f"baseline error for {key} must be > 0")
        err = 1.0 - getattr(row, attr)
        num, den = by_kind.get(row.kind, (0.0, 0.0))
        by_kind[row.kind] = (num + err, den + base)
    if not by_kind:
        raise MissingBaselineError("report has no corruption rows to normalize")
    ratios = [num / den for num, den in by_kind.values()]
    return 100.0 * float(np.mean(ratios))


def bench_correction(sizes, cfg, repeats: int = 5, seed: int = 0):
    """Median wallclock of one correction per activation size.

    Returns a list of (n, seconds). Targets are sorted standard normals;
    inputs are fresh normal draws, so the sort cost dominates as intended.
    """
    from .correction import correct
    from .otcore import TargetDistribution

    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for n in sizes:
        n = int(n)
        t = np.sort(rng.normal(size=n))
        t -= t.mean()
        target = TargetDistribution(
            t=t, sample_count=2, variance=np.zeros(n), layer_id=f"bench{n}"
        )
        a = rng.normal(size=n).astype(np.float32)
        correct(a, target, cfg)  # warm up caches before timing
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            correct(a, target, cfg)
            times.append(time.perf_counter() - t0)
        out.append((n, float(np.median(times))))
    return out


def fit_nlogn_exponent(samples) -> float:
    """Least-squares slope of log(time) against log(n log2 n).

    A value near 1.0 means the measured cost tracks the n log n model.
    """
    if len(samples) < 2:
        raise EmptySuiteError("need at least two sizes to fit an exponent")
    x = np.array([np.log(n * np.log2(n)) for n, _ in samples])
    y = np.array([np.log(t) for _, t in samples])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
