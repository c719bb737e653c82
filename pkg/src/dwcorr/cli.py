"""Command-line front end: train, build-targets, evaluate, sweep, diagnose, bench.

Every command is deterministic given its flags and seeds. Reports are
CSV (UTF-8, comma-separated) whose first line is a comment carrying the
tool version and the SHA-256 of every input artifact, so a report can
always be traced back to the exact files that produced it. Timing
columns are wallclock and therefore exempt from byte-for-byte
determinism; pass --no-timing to zero them when comparing outputs.

Exit codes: 0 success, 2 usage error, 3 data or provenance error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .correction import CorrectionConfig
from .corruption import ALL_KINDS, CorruptionSpec, SeverityConfig, default_severity_config
from .datasets import resolve_dataset
from .errors import (
    DivergenceDetectedError,
    DwcorrError,
    EmptySuiteError,
    NonFiniteError,
    NonPositiveVarianceError,
    ProvenanceMismatchError,
    UnknownKindError,
)
from .evaluate import (
    EvalReport,
    bench_correction,
    compute_mce,
    fit_nlogn_exponent,
    run_suite,
)
from .nn import MLPSpec, Model, TrainConfig, attach_correction, forward, train_mlp
from .otcore import channel_dissimilarity, sort_with_indices
from .store import file_sha256, load_model, load_targets, save_model, save_targets
from .targets import build_targets

__all__ = ["main"]

_NUMERIC_ERRORS = (NonFiniteError, DivergenceDetectedError, NonPositiveVarianceError)


def _ints(text: str) -> list:
    return [int(tok) for tok in text.split(",") if tok != ""]


def _floats(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok != ""]


def _parse_arch(text: str):
    family, _, sizes = text.partition(":")
    if family != "mlp":
        raise argparse.ArgumentTypeError(f"unknown architecture family '{family}'")
    hidden = tuple(_ints(sizes)) if sizes else ()
    if any(h < 1 for h in hidden):
        raise argparse.ArgumentTypeError("hidden sizes must be >= 1")
    return hidden


def _severity_config(args) -> SeverityConfig:
    if getattr(args, "severity_config", None):
        return SeverityConfig.from_file(args.severity_config)
    return default_severity_config()


def _load_data(args, split: str):
    count = args.train_count if split == "train" else args.test_count
    return resolve_dataset(args.data, split, count, seed=args.data_seed, data_dir=args.data_dir)


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", default="synthetic-blobs", help="dataset name (synthetic-blobs, mnist)")
    p.add_argument("--data-dir", default=None, help="directory holding IDX files (or set DWCORR_DATA_DIR)")
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthetic data generation")


def _add_correction_flags(p: argparse.ArgumentParser):
    p.add_argument("--lambda1", type=float, default=0.75, help="prior step size")
    p.add_argument("--lambda2", type=float, default=0.25, help="likelihood step size")
    p.add_argument("--n-iter", type=int, default=2, help="correction iterations")
    p.add_argument(
        "--placement",
        choices=("after_relu", "after_conv"),
        default="after_relu",
        help="after_conv disables zero preservation",
    )
    p.add_argument("--sites", default=None, help="comma-separated tap names (default: all in targets)")


def _add_suite_flags(p: argparse.ArgumentParser):
    p.add_argument("--kinds", default="all", help="comma-separated corruption kinds or 'all'")
    p.add_argument("--severities", default="1,3,5", help="comma-separated severities in 1..5")
    p.add_argument("--corruption-seed", type=int, default=0)
    p.add_argument("--severity-config", default=None, help="path to an alternate severity table")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--no-timing", action="store_true", help="zero the wallclock columns for byte-stable output")


def _build_specs(args) -> list:
    kinds = list(ALL_KINDS) if args.kinds == "all" else [k.strip() for k in args.kinds.split(",")]
    severities = _ints(args.severities)
    if not kinds or not severities:
        raise UsageError("need at least one kind and one severity")
    specs = []
    try:
        for kind in kinds:
            if kind == "identity":
                specs.append(CorruptionSpec(kind="identity", severity=1, seed=args.corruption_seed))
                continue
            for sev in severities:
                specs.append(CorruptionSpec(kind=kind, severity=sev, seed=args.corruption_seed))
    except (UnknownKindError, ValueError) as exc:
        # bad --kinds/--severities values are usage errors, not data errors
        raise UsageError(str(exc)) from exc
    return specs


class UsageError(Exception):
    pass


def _hash_line(parts: dict) -> str:
    frags = " ".join(f"{k}={v}" for k, v in parts.items())
    return f"# dwcorr {__version__} {frags}"


def _write_report_csv(path, report: EvalReport, hashes: dict, no_timing: bool, mce: dict | None = None):
    lines = [_hash_line(hashes)]
    lines.append(
        "kind,severity,n_samples,accuracy_uncorrected,accuracy_corrected,"
        "ms_per_sample_uncorrected,ms_per_sample_corrected"
    )
    for r in report.rows:
        tu = 0.0 if no_timing else r.ms_per_sample_uncorrected
        tc = 0.0 if no_timing else r.ms_per_sample_corrected
        lines.append(
            f"{r.kind},{r.severity},{r.n_samples},"
            f"{r.accuracy_uncorrected:.6f},{r.accuracy_corrected:.6f},{tu:.4f},{tc:.4f}"
        )
    s = report.summary
    lines.append(
        f"summary,,{sum(r.n_samples for r in report.rows)},"
        f"{s['mean_accuracy_uncorrected']:.6f},{s['mean_accuracy_corrected']:.6f},,"
    )
    if mce:
        for key, value in mce.items():
            lines.append(f"# {key}={value:.4f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _read_baseline_errors(path) -> dict:
    errors = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("kind,"):
                continue
            parts = line.split(",")
            if parts[0] == "summary" or parts[0] == "identity":
                continue
            errors[(parts[0], int(parts[1]))] = 1.0 - float(parts[3])
    return errors


# --- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    x, y = _load_data(args, "train")
    spec = MLPSpec(hidden=args.arch, norm=args.norm, classes=int(y.max()) + 1)
    cfg = TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        decay_epochs=tuple(_ints(args.decay_epochs)) if args.decay_epochs else (),
        decay_factor=args.decay_factor,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    model, metrics = train_mlp((x, y), spec, cfg)
    provenance = {
        "dataset": args.data,
        "data_seed": args.data_seed,
        "train_count": args.train_count,
        "arch": "mlp:" + ",".join(str(h) for h in args.arch),
        "norm": args.norm,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    save_model(args.out, model, provenance=provenance)
    print(f"wrote {args.out} sha256={file_sha256(args.out)[:12]}")
    print(f"clean_accuracy={metrics['train_accuracy']:.4f} val_accuracy={metrics['val_accuracy']:.4f}")
    return 0


def cmd_build_targets(args) -> int:
    model = load_model(args.model)
    x, _ = _load_data(args, "train")
    sites = [s.strip() for s in args.sites.split(",")] if args.sites else sorted(model.taps)
    targets = build_targets(model, x, sites, subsample=args.subsample, batch_size=args.batch_size)
    provenance = {
        "model_sha256": file_sha256(args.model),
        "dataset": args.data,
        "data_seed": args.data_seed,
        "subsample": args.subsample,
        "sample_count": next(iter(targets.values())).sample_count,
    }
    save_targets(args.out, targets, provenance=provenance)
    counts = {layer: t.sample_count for layer, t in targets.items()}
    print(f"wrote {args.out} sha256={file_sha256(args.out)[:12]}")
    print(f"sites={','.join(sorted(targets))} M={counts[sites[0]]}")
    return 0


def _load_linked(args):
    """Load model + targets, enforcing the recorded model hash."""
    model = load_model(args.model)
    targets = load_targets(args.targets)
    from .store import read_header

    recorded = read_header(args.targets).metadata.get("provenance", {}).get("model_sha256")
    actual = file_sha256(args.model)
    if recorded and recorded != actual and not args.allow_provenance_mismatch:
        raise ProvenanceMismatchError(
            f"targets were built for model {recorded[:12]}, got {actual[:12]} "
            "(pass --allow-provenance-mismatch to override)"
        )
    return model, targets, actual


def _select_targets(targets: dict, args) -> dict:
    if not args.sites:
        return targets
    wanted = [s.strip() for s in args.sites.split(",")]
    missing = [s for s in wanted if s not in targets]
    if missing:
        raise UsageError(f"sites not present in targets file: {','.join(missing)}")
    return {s: targets[s] for s in wanted}


def cmd_evaluate(args) -> int:
    model, targets, model_sha = _load_linked(args)
    targets = _select_targets(targets, args)
    cfg = CorrectionConfig(lambda1=args.lambda1, lambda2=args.lambda2, n_iter=args.n_iter)
    corrected = attach_correction(model, targets, cfg, placement=args.placement)
    dataset = _load_data(args, "test")
    severity = _severity_config(args)
    specs = _build_specs(args)
    report = run_suite(
        model,
        corrected,
        dataset,
        specs,
        config=severity,
        threads=args.threads,
        batch_size=args.batch_size,
    )
    mce = None
    if args.baseline:
        baseline = _read_baseline_errors(args.baseline)
        mce = {
            "mce_uncorrected": compute_mce(report, baseline, column="uncorrected"),
            "mce_corrected": compute_mce(report, baseline, column="corrected"),
        }
    hashes = {
        "model": model_sha[:12],
        "targets": file_sha256(args.targets)[:12],
        "severity": severity.sha256[:12],
        "seed": args.corruption_seed,
        "lambda1": args.lambda1,
        "lambda2": args.lambda2,
        "n_iter": args.n_iter,
    }
    _write_report_csv(args.out, report, hashes, args.no_timing, mce)
    for r in report.rows:
        print(
            f"{r.kind} sev={r.severity} uncorrected={r.accuracy_uncorrected:.4f} "
            f"corrected={r.accuracy_corrected:.4f}"
        )
    s = report.summary
    print(
        f"mean uncorrected={s['mean_accuracy_uncorrected']:.4f} "
        f"corrected={s['mean_accuracy_corrected']:.4f}"
    )
    if mce:
        print(f"mce_uncorrected={mce['mce_uncorrected']:.2f} mce_corrected={mce['mce_corrected']:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    model, targets, model_sha = _load_linked(args)
    targets = _select_targets(targets, args)
    grid1, grid2, gridn = _floats(args.lambda1_grid), _floats(args.lambda2_grid), _ints(args.n_iter_grid)
    points = [(l1, l2, n) for l1 in grid1 for l2 in grid2 for n in gridn]
    if len(points) != len(set(points)):
        raise UsageError("duplicate grid points in sweep")
    dataset = _load_data(args, "test")
    severity = _severity_config(args)
    specs = _build_specs(args)

    def mean_corrected(cfg: CorrectionConfig) -> float:
        corrected = attach_correction(model, targets, cfg, placement=args.placement)
        report = run_suite(
            model, corrected, dataset, specs,
            config=severity, threads=args.threads, batch_size=args.batch_size,
        )
        return report.summary["mean_accuracy_corrected"]

    # n_iter=0 still centers the activations and restores zeros; it is a
    # centering baseline, not a bit-identical pass-through.
    baseline = mean_corrected(CorrectionConfig(lambda1=0.0, lambda2=0.0, n_iter=0))
    lines = [
        _hash_line(
            {
                "model": model_sha[:12],
                "targets": file_sha256(args.targets)[:12],
                "severity": severity.sha256[:12],
                "seed": args.corruption_seed,
            }
        ),
        "lambda1,lambda2,n_iter,mean_corrected_accuracy,baseline_niter0",
    ]
    for l1, l2, n in points:
        acc = mean_corrected(CorrectionConfig(lambda1=l1, lambda2=l2, n_iter=n))
        lines.append(f"{l1},{l2},{n},{acc:.6f},{baseline:.6f}")
        print(f"lambda1={l1} lambda2={l2} n_iter={n} corrected={acc:.4f}")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    model, targets, model_sha = _load_linked(args)
    dataset_x, _ = _load_data(args, "test")
    layer = args.layer or sorted(targets)[0]
    if layer not in targets:
        raise UsageError(f"layer '{layer}' not in targets file")
    cfg = CorrectionConfig(lambda1=args.lambda1, lambda2=args.lambda2, n_iter=args.n_iter)
    corrected = attach_correction(model, targets, cfg, placement=args.placement)
    os.makedirs(args.out_dir, exist_ok=True)
    head = _hash_line({"model": model_sha[:12], "targets": file_sha256(args.targets)[:12]})

    sample_idx = _ints(args.samples)
    batch = dataset_x[sample_idx]
    _, taps_before = forward(model, batch, taps=[layer])
    _, taps_after = forward(corrected, batch, taps=[f"{layer}:corrected"])

    with open(os.path.join(args.out_dir, "variance_profile.csv"), "w", encoding="utf-8") as f:
        f.write(head + "\nlayer,rank,t,sigma2\n")
        for layer_id in sorted(targets):
            tgt = targets[layer_id]
            for i in range(tgt.n):
                f.write(f"{layer_id},{i},{tgt.t[i]:.9g},{tgt.variance[i]:.9g}\n")

    with open(os.path.join(args.out_dir, "before_after.csv"), "w", encoding="utf-8") as f:
        f.write(head + "\nsample,rank,before_sorted,after_sorted\n")
        for row_i, s in enumerate(sample_idx):
            before = sort_with_indices(taps_before[layer][row_i].reshape(-1)).values
            after = sort_with_indices(taps_after[f"{layer}:corrected"][row_i].reshape(-1)).values
            for i in range(before.size):
                f.write(f"{s},{i},{before[i]:.9g},{after[i]:.9g}\n")

    acts = [_channels(taps_before[layer][i]) for i in range(len(sample_idx))]
    with open(os.path.join(args.out_dir, "dissimilar.csv"), "w", encoding="utf-8") as f:
        f.write(head + "\nquery,most_dissimilar\n")
        for qi, s in enumerate(sample_idx):
            f.write(f"{s},{sample_idx[channel_dissimilarity(qi, acts)]}\n")

    with open(os.path.join(args.out_dir, "map_diff.csv"), "w", encoding="utf-8") as f:
        f.write(head + "\nlayer,mean_abs_diff\n")
        for layer_id in sorted(targets):
            _, tb = forward(model, batch, taps=[layer_id])
            _, ta = forward(corrected, batch, taps=[f"{layer_id}:corrected"])
            diff = float(np.mean(np.abs(ta[f"{layer_id}:corrected"] - tb[layer_id])))
            f.write(f"{layer_id},{diff:.9g}\n")

    print(f"wrote diagnostics under {args.out_dir}")
    return 0


def _channels(activation: np.ndarray) -> list:
    if activation.ndim == 3:  # (H, W, C) -> C channels of H*W values
        return [activation[:, :, c].reshape(-1) for c in range(activation.shape[2])]
    return [np.asarray([v]) for v in activation.reshape(-1)]


def cmd_bench(args) -> int:
    sizes = _ints(args.sizes)
    if any(n < 1 for n in sizes):
        raise UsageError("bench sizes must be >= 1")
    cfg = CorrectionConfig(lambda1=args.lambda1, lambda2=args.lambda2, n_iter=args.n_iter)
    samples = bench_correction(sizes, cfg, repeats=args.repeats)
    exponent = fit_nlogn_exponent(samples) if len(samples) >= 2 else float("nan")
    lines = [_hash_line({"n_iter": args.n_iter}), "n,seconds_per_correction"]
    for n, sec in samples:
        lines.append(f"{n},{sec:.9g}")
        print(f"n={n} {1000 * sec:.4f} ms/correction")
    lines.append(f"# nlogn_exponent={exponent:.4f}")
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"nlogn_exponent={exponent:.4f}")
    print(f"wrote {args.out}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dwcorr",
        description="Test-time activation-distribution correction toolkit",
    )
    parser.add_argument("--version", action="version", version=f"dwcorr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an MLP and write a model archive")
    _add_data_flags(p)
    p.add_argument("--arch", type=_parse_arch, default=(128, 64), help="mlp:H1,H2,...")
    p.add_argument("--norm", choices=("none", "bn"), default="bn")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--decay-epochs", default="", help="comma-separated epoch indices")
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-targets", help="build correction targets from clean data")
    _add_data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--sites", default=None, help="comma-separated tap names (default: all)")
    p.add_argument("--subsample", type=int, default=1, help="keep every k-th sample")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_targets)

    p = sub.add_parser("evaluate", help="run a corruption suite with and without correction")
    _add_data_flags(p)
    _add_correction_flags(p)
    _add_suite_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--allow-provenance-mismatch", action="store_true")
    p.add_argument("--baseline", default=None, help="baseline report CSV for mCE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid-sweep correction hyperparameters")
    _add_data_flags(p)
    _add_correction_flags(p)
    _add_suite_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--allow-provenance-mismatch", action="store_true")
    p.add_argument("--lambda1-grid", default="0.25,0.5,0.75")
    p.add_argument("--lambda2-grid", default="0.25,0.5")
    p.add_argument("--n-iter-grid", default="1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="dump variance profiles and before/after distributions")
    _add_data_flags(p)
    _add_correction_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--allow-provenance-mismatch", action="store_true")
    p.add_argument("--layer", default=None, help="tap name for the before/after dump")
    p.add_argument("--samples", default="0,1,2,3", help="comma-separated sample indices")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bench", help="time corrections across activation sizes")
    p.add_argument("--sizes", default=",".join(str(2**k) for k in range(10, 21)))
    p.add_argument("--lambda1", type=float, default=0.75)
    p.add_argument("--lambda2", type=float, default=0.25)
    p.add_argument("--n-iter", type=int, default=2)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help/--version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (DwcorrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        # plain ValueError at this level means a bad flag value
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
