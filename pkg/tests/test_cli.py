import json

import numpy as np
import pytest

from pnca.cli import main, parse_config, run_experiment

pytestmark = pytest.mark.usefixtures("fixture_paths")


def dataset_args(paths):
    return [
        "--train-images", str(paths["train_images"]),
        "--train-labels", str(paths["train_labels"]),
        "--test-images", str(paths["test_images"]),
        "--test-labels", str(paths["test_labels"]),
    ]


def fast_args(paths, out_dir, model="nca", extra=()):
    return [
        "run",
        "--model", model,
        *dataset_args(paths),
        "--output", str(out_dir),
        "--n-train", "20",
        "--trials", "1",
        "--epochs", "3",
        "--hidden-dims", "8",
        "--latent-dim", "4",
        "--particles", "2",
        "--ensemble-size", "2",
        *extra,
    ]


class TestParseConfig:
    def test_defaults_match_protocol(self, fixture_paths):
        config = parse_config(["run", "--model", "nca", *dataset_args(fixture_paths)])
        assert config.epochs == 100
        assert config.lr == 1e-3
        assert config.n_train == 100
        assert config.trials == 10
        assert config.batch_size == 20
        assert config.particles == 20
        assert config.kernel_path == "auto"
        assert config.rotate == 60.0

    def test_flag_overrides(self, fixture_paths):
        config = parse_config(
            ["run", "--model", "pnca", "--particles", "5", *dataset_args(fixture_paths)]
        )
        assert config.model == "pnca" and config.particles == 5

    def test_zero_epochs_is_usage_error(self, fixture_paths):
        with pytest.raises(SystemExit):
            parse_config(
                ["run", "--model", "nca", "--epochs", "0", *dataset_args(fixture_paths)]
            )

    def test_model_required(self, fixture_paths):
        with pytest.raises(SystemExit):
            parse_config(["run", *dataset_args(fixture_paths)])

    def test_dataset_paths_required(self):
        with pytest.raises(SystemExit):
            parse_config(["run", "--model", "nca"])

    def test_bad_kernel_path_rejected(self, fixture_paths):
        with pytest.raises(SystemExit):
            parse_config(
                ["run", "--model", "pnca", "--kernel-path", "magic",
                 *dataset_args(fixture_paths)]
            )

    def test_config_file_and_flag_precedence(self, fixture_paths, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": "dnn", "epochs": 7, "seed": 4}))
        config = parse_config(
            ["run", "--config", str(cfg), "--epochs", "9",
             *dataset_args(fixture_paths)]
        )
        assert config.model == "dnn"
        assert config.epochs == 9  # flag beats config file
        assert config.seed == 4  # config file beats default

    def test_unknown_config_key_rejected(self, fixture_paths, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"model": "dnn", "warp_speed": 9}))
        with pytest.raises(SystemExit):
            parse_config(["run", "--config", str(cfg), *dataset_args(fixture_paths)])


class TestRun:
    @pytest.mark.parametrize("model", ["nca", "pnca", "dnn", "ensemble", "bnn"])
    def test_smoke_every_model(self, fixture_paths, tmp_path, model):
        out = tmp_path / "reports"
        code = main(
            fast_args(
                fixture_paths, out, model,
                extra=["--ood-dir", str(fixture_paths["ood_dir"])],
            )
        )
        assert code == 0
        clean = json.loads((out / "trial00_clean.json").read_text())
        assert clean["model"] == model
        assert sum(clean["counts"]) == 100
        assert 0.0 <= clean["overall_accuracy"] <= 1.0
        assert clean["n_train"] == 20
        assert clean["config"]["epochs"] == 3
        rotated = json.loads((out / "trial00_rotated.json").read_text())
        assert sum(rotated["counts"]) == 100
        ood = json.loads((out / "trial00_ood.json").read_text())
        assert sum(ood["counts"]) == 40
        assert "accuracies" not in ood and "overall_accuracy" not in ood
        summary = json.loads((out / "summary.json").read_text())
        assert "clean_accuracy" in summary["metrics"]

    def test_reports_are_byte_identical_across_runs(self, fixture_paths, tmp_path):
        out = tmp_path / "reports"
        names = ("trial00_clean.json", "trial00_rotated.json",
                 "trial00_ood.json", "summary.json")
        args = fast_args(
            fixture_paths, out, "pnca",
            extra=["--kernel-path", "orf", "--ood-dir", str(fixture_paths["ood_dir"])],
        )
        assert main(args) == 0
        first = {name: (out / name).read_bytes() for name in names}
        assert main(args) == 0
        for name in names:
            assert (out / name).read_bytes() == first[name], name

    def test_thread_env_does_not_change_outputs(
        self, fixture_paths, tmp_path, monkeypatch
    ):
        out = tmp_path / "reports"
        names = ("trial00_clean.json", "trial01_clean.json", "summary.json")
        args = fast_args(fixture_paths, out, "dnn", extra=["--trials", "2"])
        assert main(args) == 0
        first = {name: (out / name).read_bytes() for name in names}
        monkeypatch.setenv("PNCA_THREADS", "2")
        assert main(args) == 0
        for name in names:
            assert (out / name).read_bytes() == first[name], name

    def test_missing_dataset_path_exits_one(self, fixture_paths, tmp_path):
        args = fast_args(fixture_paths, tmp_path / "r")
        args[args.index("--train-images") + 1] = str(tmp_path / "nope.idx")
        assert main(args) == 1

    def test_oversized_subset_exits_one(self, fixture_paths, tmp_path):
        assert (
            main(fast_args(fixture_paths, tmp_path / "r", extra=["--n-train", "999"]))
            == 1
        )

    def test_numeric_divergence_exits_two(self, fixture_paths, tmp_path):
        with np.errstate(all="ignore"):
            code = main(
                fast_args(
                    fixture_paths, tmp_path / "r",
                    extra=["--lr", "1e150", "--epochs", "40"],
                )
            )
        assert code == 2

    def test_rotate_zero_skips_rotated_split(self, fixture_paths, tmp_path):
        out = tmp_path / "r"
        assert main(fast_args(fixture_paths, out, extra=["--rotate", "0"])) == 0
        assert not (out / "trial00_rotated.json").exists()

    def test_csv_pipeline(self, tmp_path):
        rng = np.random.default_rng(0)
        for name, n in (("train.csv", 40), ("test.csv", 20)):
            x = rng.normal(size=(n, 3))
            y = rng.integers(0, 2, size=n)
            lines = ["f0,f1,f2,label"] + [
                ",".join(repr(float(v)) for v in row) + f",{label}"
                for row, label in zip(x, y)
            ]
            (tmp_path / name).write_text("\n".join(lines) + "\n")
        out = tmp_path / "reports"
        code = main(
            [
                "run", "--model", "dnn",
                "--train-csv", str(tmp_path / "train.csv"),
                "--test-csv", str(tmp_path / "test.csv"),
                "--output", str(out),
                "--n-train", "10", "--trials", "1", "--epochs", "3",
                "--hidden-dims", "6", "--batch-size", "5",
            ]
        )
        assert code == 0
        clean = json.loads((out / "trial00_clean.json").read_text())
        assert sum(clean["counts"]) == 20
        assert not (out / "trial00_rotated.json").exists()  # no images to rotate


class TestReportAndInspect:
    def test_report_converts_json_to_csv(self, fixture_paths, tmp_path):
        out = tmp_path / "r"
        assert main(fast_args(fixture_paths, out)) == 0
        csv_path = tmp_path / "clean.csv"
        assert main(["report", str(out / "trial00_clean.json"), str(csv_path)]) == 0
        lines = csv_path.read_text().strip().split("\n")
        assert lines[0] == "bin_lo,bin_hi,count,accuracy"
        assert len(lines) == 11

    def test_inspect_idx(self, fixture_paths, capsys):
        code = main(
            ["inspect", str(fixture_paths["train_images"]),
             "--labels", str(fixture_paths["train_labels"])]
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "200 x 28x28" in printed
        assert "label histogram" in printed
        assert "sha256" in printed

    def test_inspect_missing_file(self, tmp_path):
        assert main(["inspect", str(tmp_path / "ghost.idx")]) == 1

    def test_inspect_model_files(self, tmp_path, capsys):
        from pnca.mlp import MlpSpec, init_params, save_params
        from pnca.probabilistic import ParticleEnsemble, save_ensemble
        from pnca.rng import seeded_rng

        spec = MlpSpec((4, 3, 2))
        save_params(tmp_path / "w.pnca", spec, init_params(spec, seeded_rng(0)))
        assert main(["inspect", str(tmp_path / "w.pnca")]) == 0
        assert "parameter vector" in capsys.readouterr().out

        ens = ParticleEnsemble(
            np.stack([init_params(spec, seeded_rng(i)) for i in range(3)])
        )
        save_ensemble(tmp_path / "e.pnca", spec, ens)
        assert main(["inspect", str(tmp_path / "e.pnca")]) == 0
        assert "m=3" in capsys.readouterr().out
