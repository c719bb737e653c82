"""End-to-end CLI runs: artifacts, report formats, exit codes.

Key properties tested:
- train/build-targets/evaluate produce deterministic archives and CSVs
  (same flags -> identical bytes; thread count changes nothing once the
  timing columns are zeroed)
- report CSV layout: hash comment, fixed header, one row per suite cell,
  a summary row whose means match the rows
- sweep's single-cell run agrees with evaluate; duplicate grids are
  rejected; diagnose writes the four documented dumps
- exit codes: 0 success, 2 usage, 3 data/provenance, 4 numeric failure
"""

import json
import struct

import numpy as np
import pytest

from dwcorr.cli import main
from dwcorr.datasets import resolve_dataset
from dwcorr.nn import predict
from dwcorr.store import file_sha256, load_model, load_targets, read_header
from dwcorr.targets import build_targets

TRAIN_FLAGS = [
    "--data", "synthetic-blobs",
    "--train-count", "300",
    "--data-seed", "0",
    "--arch", "mlp:24",
    "--norm", "bn",
    "--lr", "0.05",
    "--epochs", "3",
    "--seed", "0",
]
SMALL_TEST = ["--test-count", "120"]


def read_csv(path):
    lines = [l.rstrip("\n") for l in open(path, encoding="utf-8")]
    hash_line = lines[0]
    header = lines[1]
    rows, extras = [], []
    for line in lines[2:]:
        if line.startswith("#"):
            extras.append(line)
        elif line:
            rows.append(line.split(","))
    return hash_line, header, rows, extras


@pytest.fixture(scope="module")
def art(tmp_path_factory):
    """Shared trained model + targets for the evaluate-family tests."""
    root = tmp_path_factory.mktemp("cli")
    model = root / "model.dwm"
    targets = root / "targets.dwt"
    assert main(["train", *TRAIN_FLAGS, "--out", str(model)]) == 0
    assert main(
        ["build-targets", *TRAIN_FLAGS[:6], "--model", str(model), "--out", str(targets)]
    ) == 0
    return {"root": root, "model": str(model), "targets": str(targets)}


def evaluate_args(art, out, kinds="identity,gaussian_noise", severities="3", extra=()):
    return [
        "evaluate",
        "--data", "synthetic-blobs",
        *SMALL_TEST,
        "--data-seed", "0",
        "--model", art["model"],
        "--targets", art["targets"],
        "--kinds", kinds,
        "--severities", severities,
        "--no-timing",
        "--out", str(out),
        *extra,
    ]


class TestTrain:
    def test_deterministic_archives(self, art, tmp_path):
        other = tmp_path / "again.dwm"
        assert main(["train", *TRAIN_FLAGS, "--out", str(other)]) == 0
        assert file_sha256(other) == file_sha256(art["model"])

    def test_model_contents(self, art):
        model = load_model(art["model"])
        assert set(model.taps) == {"pixels", "relu1"}
        assert model.input_shape == (16, 16, 1)
        hdr = read_header(art["model"])
        assert hdr.metadata["provenance"]["arch"] == "mlp:24"

    def test_epochs_zero_is_near_chance(self, tmp_path):
        out = tmp_path / "untrained.dwm"
        args = ["train", *TRAIN_FLAGS, "--out", str(out)]
        args[args.index("--epochs") + 1] = "0"
        assert main(args) == 0
        model = load_model(out)
        images, labels = resolve_dataset("synthetic-blobs", "train", 300, seed=0)
        acc = float(np.mean(predict(model, images) == labels))
        assert acc <= 0.35

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_4(self, tmp_path):
        out = tmp_path / "x.dwm"
        assert main(
            [
                "train",
                "--train-count", "200",
                "--arch", "mlp:8",
                "--norm", "none",
                "--lr", "1e200",
                "--epochs", "1",
                "--batch-size", "32",
                "--out", str(out),
            ]
        ) == 4

    def test_bad_arch_exits_2(self, tmp_path):
        assert main(["train", "--arch", "cnn:8", "--out", str(tmp_path / "x.dwm")]) == 2


class TestBuildTargets:
    def test_default_sites_and_provenance(self, art):
        targets = load_targets(art["targets"])
        assert set(targets) == {"pixels", "relu1"}
        assert targets["pixels"].n == 256
        assert targets["relu1"].n == 24
        for t in targets.values():
            assert t.sample_count == 300
        prov = read_header(art["targets"]).metadata["provenance"]
        assert prov["model_sha256"] == file_sha256(art["model"])

    def test_subsample_matches_api(self, art, tmp_path):
        out = tmp_path / "sub.dwt"
        assert main(
            [
                "build-targets",
                *TRAIN_FLAGS[:6],
                "--model", art["model"],
                "--subsample", "10",
                "--out", str(out),
            ]
        ) == 0
        sub = load_targets(out)
        assert sub["relu1"].sample_count == 30
        images, _ = resolve_dataset("synthetic-blobs", "train", 300, seed=0)
        api = build_targets(load_model(art["model"]), images, ["pixels", "relu1"], subsample=10)
        np.testing.assert_allclose(sub["relu1"].t, api["relu1"].t, atol=1e-9)
        np.testing.assert_allclose(sub["pixels"].t, api["pixels"].t, atol=1e-9)

    def test_unknown_site_exits_3(self, art, tmp_path):
        rc = main(
            [
                "build-targets",
                *TRAIN_FLAGS[:6],
                "--model", art["model"],
                "--sites", "conv9",
                "--out", str(tmp_path / "x.dwt"),
            ]
        )
        assert rc == 3


class TestEvaluate:
    def test_report_format(self, art, tmp_path):
        out = tmp_path / "report.csv"
        assert main(evaluate_args(art, out)) == 0
        hash_line, header, rows, _ = read_csv(out)
        assert hash_line.startswith("# dwcorr ")
        for key in ("model=", "targets=", "severity=", "seed=0"):
            assert key in hash_line
        assert header == (
            "kind,severity,n_samples,accuracy_uncorrected,accuracy_corrected,"
            "ms_per_sample_uncorrected,ms_per_sample_corrected"
        )
        body, summary = rows[:-1], rows[-1]
        assert [(r[0], r[1]) for r in body] == [("identity", "1"), ("gaussian_noise", "3")]
        for r in body:
            assert r[2] == "120"
            assert 0.0 <= float(r[3]) <= 1.0 and 0.0 <= float(r[4]) <= 1.0
            assert r[5] == "0.0000" and r[6] == "0.0000"  # --no-timing
        assert summary[0] == "summary" and summary[2] == "240"
        assert float(summary[3]) == pytest.approx(
            np.mean([float(r[3]) for r in body]), abs=1e-6
        )
        assert float(summary[4]) == pytest.approx(
            np.mean([float(r[4]) for r in body]), abs=1e-6
        )

    def test_identity_collapses_to_one_row(self, art, tmp_path):
        out = tmp_path / "ident.csv"
        assert main(evaluate_args(art, out, kinds="identity", severities="1,3,5")) == 0
        _, _, rows, _ = read_csv(out)
        assert [(r[0], r[1]) for r in rows[:-1]] == [("identity", "1")]

    def test_thread_count_never_changes_bytes(self, art, tmp_path):
        outs = []
        for threads in ("1", "4"):
            out = tmp_path / f"t{threads}.csv"
            rc = main(
                evaluate_args(
                    art,
                    out,
                    kinds="identity,gaussian_noise,contrast",
                    severities="1,5",
                    extra=["--threads", threads],
                )
            )
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_repeat_run_is_byte_identical(self, art, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(evaluate_args(art, a)) == 0
        assert main(evaluate_args(art, b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_mce_against_own_baseline_is_100(self, art, tmp_path):
        base = tmp_path / "base.csv"
        suite = dict(kinds="gaussian_noise,fog_haze", severities="3,5")
        assert main(evaluate_args(art, base, **suite)) == 0
        second = tmp_path / "second.csv"
        assert main(
            evaluate_args(art, second, **suite, extra=["--baseline", str(base)])
        ) == 0
        _, _, _, extras = read_csv(second)
        mce = {
            line.split("=")[0][2:]: float(line.split("=")[1])
            for line in extras
            if line.startswith("# mce_")
        }
        assert abs(mce["mce_uncorrected"] - 100.0) <= 0.01
        assert mce["mce_corrected"] > 0.0

    def test_mce_identity_only_exits_3(self, art, tmp_path):
        base = tmp_path / "base.csv"
        assert main(evaluate_args(art, base)) == 0
        rc = main(
            evaluate_args(
                art,
                tmp_path / "x.csv",
                kinds="identity",
                extra=["--baseline", str(base)],
            )
        )
        assert rc == 3

    def test_custom_severity_table(self, art, tmp_path):
        sev = tmp_path / "sev.json"
        sev.write_text(
            json.dumps(
                {
                    "version": 1,
                    "kinds": {"brightness": {"param": "shift", "levels": [0, 0, 0, 0, 0]}},
                }
            )
        )
        flat = tmp_path / "flat.csv"
        ident = tmp_path / "ident.csv"
        assert main(
            evaluate_args(
                art, flat, kinds="brightness", severities="5",
                extra=["--severity-config", str(sev)],
            )
        ) == 0
        assert main(evaluate_args(art, ident, kinds="identity", severities="1")) == 0
        _, _, rows_f, _ = read_csv(flat)
        _, _, rows_i, _ = read_csv(ident)
        # shift 0 must behave exactly like identity
        assert rows_f[0][3] == rows_i[0][3]
        assert rows_f[0][4] == rows_i[0][4]

    def test_provenance_mismatch_exits_3(self, art, tmp_path):
        other = tmp_path / "other.dwm"
        args = ["train", *TRAIN_FLAGS, "--out", str(other)]
        args[args.index("--seed") + 1] = "1"
        assert main(args) == 0
        mismatched = dict(art, model=str(other))
        assert main(evaluate_args(mismatched, tmp_path / "x.csv")) == 3
        assert main(
            evaluate_args(
                mismatched, tmp_path / "y.csv", extra=["--allow-provenance-mismatch"]
            )
        ) == 0

    def test_usage_errors_exit_2(self, art, tmp_path):
        out = tmp_path / "x.csv"
        assert main(evaluate_args(art, out, severities="9")) == 2
        assert main(evaluate_args(art, out, kinds="speckle")) == 2
        assert main(evaluate_args(art, out, extra=["--sites", "nope"])) == 2
        assert main(evaluate_args(art, out, extra=["--lambda1", "2.0"])) == 2

    def test_missing_model_exits_3(self, art, tmp_path):
        broken = dict(art, model=str(tmp_path / "missing.dwm"))
        assert main(evaluate_args(broken, tmp_path / "x.csv")) == 3

    def test_corrupted_archive_exits_3(self, art, tmp_path):
        clipped = tmp_path / "clipped.dwm"
        clipped.write_bytes(open(art["model"], "rb").read()[:-5])
        broken = dict(art, model=str(clipped))
        assert main(evaluate_args(broken, tmp_path / "x.csv")) == 3


class TestSweep:
    def sweep_args(self, art, out, grids=("0.75", "0.25", "2")):
        return [
            "sweep",
            "--data", "synthetic-blobs",
            *SMALL_TEST,
            "--data-seed", "0",
            "--model", art["model"],
            "--targets", art["targets"],
            "--kinds", "identity,gaussian_noise",
            "--severities", "3",
            "--no-timing",
            "--lambda1-grid", grids[0],
            "--lambda2-grid", grids[1],
            "--n-iter-grid", grids[2],
            "--out", str(out),
        ]

    def test_single_cell_agrees_with_evaluate(self, art, tmp_path):
        report = tmp_path / "report.csv"
        assert main(evaluate_args(art, report)) == 0
        _, _, rows, _ = read_csv(report)
        eval_mean = rows[-1][4]

        sweep_out = tmp_path / "sweep.csv"
        assert main(self.sweep_args(art, sweep_out)) == 0
        hash_line, header, srows, _ = read_csv(sweep_out)
        assert header == "lambda1,lambda2,n_iter,mean_corrected_accuracy,baseline_niter0"
        assert len(srows) == 1
        l1, l2, n, acc, baseline = srows[0]
        assert (l1, l2, n) == ("0.75", "0.25", "2")
        assert acc == eval_mean
        assert 0.0 <= float(baseline) <= 1.0

    def test_grid_enumerates_all_cells(self, art, tmp_path):
        out = tmp_path / "grid.csv"
        assert main(self.sweep_args(art, out, grids=("0.5,0.75", "0.25", "1,2"))) == 0
        _, _, rows, _ = read_csv(out)
        cells = {(r[0], r[1], r[2]) for r in rows}
        assert cells == {
            ("0.5", "0.25", "1"),
            ("0.5", "0.25", "2"),
            ("0.75", "0.25", "1"),
            ("0.75", "0.25", "2"),
        }
        # the baseline column repeats the same n_iter=0 accuracy on every row
        assert len({r[4] for r in rows}) == 1

    def test_duplicate_grid_exits_2(self, art, tmp_path):
        out = tmp_path / "dup.csv"
        assert main(self.sweep_args(art, out, grids=("0.5,0.5", "0.25", "1"))) == 2


class TestDiagnose:
    def diagnose_args(self, art, out_dir, extra=()):
        return [
            "diagnose",
            "--data", "synthetic-blobs",
            *SMALL_TEST,
            "--data-seed", "0",
            "--model", art["model"],
            "--targets", art["targets"],
            "--out-dir", str(out_dir),
            *extra,
        ]

    def test_writes_all_four_dumps(self, art, tmp_path):
        out = tmp_path / "diag"
        assert main(
            self.diagnose_args(
                art,
                out,
                extra=[
                    "--layer", "relu1",
                    "--samples", "0,1,2,3",
                    "--lambda1", "1.0",
                    "--lambda2", "0.0",
                    "--n-iter", "1",
                    "--placement", "after_conv",
                ],
            )
        ) == 0
        for name in ("variance_profile.csv", "before_after.csv", "dissimilar.csv", "map_diff.csv"):
            assert (out / name).exists()

        targets = load_targets(art["targets"])
        _, _, rows, _ = read_csv(out / "variance_profile.csv")
        assert len(rows) == targets["pixels"].n + targets["relu1"].n
        assert {r[0] for r in rows} == {"pixels", "relu1"}

        # full prior step: the sorted after column equals the target
        _, _, ba, _ = read_csv(out / "before_after.csv")
        per_sample = {}
        for sample, rank, before, after in ba:
            per_sample.setdefault(sample, []).append(float(after))
        assert set(per_sample) == {"0", "1", "2", "3"}
        for sample, after in per_sample.items():
            np.testing.assert_allclose(after, targets["relu1"].t, atol=1e-5)

        _, _, dis, _ = read_csv(out / "dissimilar.csv")
        queries = [r[0] for r in dis]
        assert queries == ["0", "1", "2", "3"]
        for q, m in dis:
            assert m in {"0", "1", "2", "3"} and m != q

        _, _, md, _ = read_csv(out / "map_diff.csv")
        assert {r[0] for r in md} == {"pixels", "relu1"}
        for r in md:
            assert float(r[1]) >= 0.0

    def test_single_sample_targets_have_zero_variance(self, art, tmp_path):
        one = tmp_path / "one.dwt"
        args = [
            "build-targets",
            *TRAIN_FLAGS[:6],
            "--model", art["model"],
            "--out", str(one),
        ]
        args[args.index("--train-count") + 1] = "1"
        assert main(args) == 0
        out = tmp_path / "diag1"
        rc = main(
            self.diagnose_args(
                dict(art, targets=str(one)), out, extra=["--samples", "0,1"]
            )
        )
        assert rc == 0
        _, _, rows, _ = read_csv(out / "variance_profile.csv")
        assert all(float(r[3]) == 0.0 for r in rows)
        # with exactly two samples each one is the other's farthest neighbor
        _, _, dis, _ = read_csv(out / "dissimilar.csv")
        assert [(r[0], r[1]) for r in dis] == [("0", "1"), ("1", "0")]

    def test_unknown_layer_exits_2(self, art, tmp_path):
        rc = main(
            self.diagnose_args(art, tmp_path / "d", extra=["--layer", "conv9"])
        )
        assert rc == 2


class TestBench:
    def test_csv_and_exponent(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(
            ["bench", "--sizes", "1024,4096,16384", "--repeats", "2", "--out", str(out)]
        ) == 0
        hash_line, header, rows, extras = read_csv(out)
        assert header == "n,seconds_per_correction"
        assert [r[0] for r in rows] == ["1024", "4096", "16384"]
        assert all(float(r[1]) > 0 for r in rows)
        exp_lines = [l for l in extras if l.startswith("# nlogn_exponent=")]
        assert len(exp_lines) == 1
        float(exp_lines[0].split("=")[1])  # parseable

    def test_bad_sizes_exit_2(self, tmp_path):
        assert main(["bench", "--sizes", "0,8", "--out", str(tmp_path / "x.csv")]) == 2


class TestMnistPath:
    def write_idx_pair(self, root, stem, n):
        rng = np.random.Generator(np.random.PCG64(50))
        pix = rng.integers(0, 256, size=(n, 6, 6), dtype=np.uint8)
        (root / f"{stem}-images-idx3-ubyte").write_bytes(
            struct.pack(">IIII", 0x00000803, n, 6, 6) + pix.tobytes()
        )
        labels = (np.arange(n) % 10).astype(np.uint8)
        (root / f"{stem}-labels-idx1-ubyte").write_bytes(
            struct.pack(">II", 0x00000801, n) + labels.tobytes()
        )

    def test_data_dir_env_var(self, tmp_path, monkeypatch):
        self.write_idx_pair(tmp_path, "train", 12)
        monkeypatch.setenv("DWCORR_DATA_DIR", str(tmp_path))
        out = tmp_path / "m.dwm"
        rc = main(
            [
                "train",
                "--data", "mnist",
                "--train-count", "10",
                "--epochs", "0",
                "--arch", "mlp:4",
                "--out", str(out),
            ]
        )
        assert rc == 0
        assert load_model(out).input_shape == (6, 6, 1)

    def test_missing_data_dir_exits_3(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DWCORR_DATA_DIR", raising=False)
        rc = main(
            ["train", "--data", "mnist", "--epochs", "0", "--out", str(tmp_path / "x.dwm")]
        )
        assert rc == 3


class TestTopLevel:
    def test_help_exits_0(self):
        assert main(["--help"]) == 0

    def test_version_exits_0(self):
        assert main(["--version"]) == 0

    def test_missing_command_exits_2(self):
        assert main([]) == 2

    def test_unknown_command_exits_2(self):
        assert main(["frobnicate"]) == 2
