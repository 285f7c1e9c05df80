"""Experiment runner: config parsing, artifacts, determinism, plots."""

import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from pcml.cli import (
    CliError,
    ExperimentConfig,
    ModelSpec,
    UQSpec,
    config_from_dict,
    config_to_dict,
    config_to_json,
    load_config,
    main,
    plot,
)
from pcml.train import TrainConfig


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def small_run_config(out, seeds=(0,), **overrides):
    data = {
        "problem": "reactor",
        "n_train": 8,
        "n_test": 10,
        "model": {"hidden": [4], "target_step": 0.5},
        "train": {"mode": "hard_sequential", "learning_rate": 0.05, "max_epochs": 25},
        "seeds": list(seeds),
        "out": str(out),
    }
    data.update(overrides)
    return data


def read_rows(path):
    return [line.split(",") for line in path.read_text(encoding="utf-8").splitlines()]


def drop_column(rows, name):
    i = rows[0].index(name)
    return [row[:i] + row[i + 1 :] for row in rows]


class TestConfigParsing:
    def test_minimal_config_fills_every_default(self):
        cfg = config_from_dict({"problem": "reactor", "train": {"mode": "soft"}})
        assert cfg.noise_sigma == 0.02
        assert cfg.n_train == 20
        assert cfg.n_test == 50
        assert cfg.model == ModelSpec(hidden=(16,), topology="ml_to_physics", target_step=0.1)
        assert cfg.train.learning_rate == 0.01
        assert cfg.train.max_epochs == 500
        assert cfg.train.data_weight == 1.0
        assert cfg.train.physics_weight == 1.0
        assert cfg.uq == UQSpec(enabled=False, samples=2000, beta=0.95, epochs=100, elbo_samples=8)
        assert cfg.seeds == (0,)
        assert cfg.out == "runs/reactor_soft"

    def test_default_out_tracks_problem_and_mode(self):
        cfg = config_from_dict({"problem": "mixer", "train": {"mode": "hard_sequential"}})
        assert cfg.out == "runs/mixer_hard_sequential"

    def test_negative_learning_rate_names_the_field(self):
        with pytest.raises(CliError, match="learning_rate"):
            config_from_dict({"problem": "reactor", "train": {"learning_rate": -0.1}})

    def test_round_trip_is_identity(self, tmp_path):
        path = write_config(
            tmp_path,
            {
                "problem": "mixer",
                "noise_sigma": 0.05,
                "n_train": 12,
                "model": {"hidden": [8, 4], "target_step": 0.2},
                "train": {
                    "mode": "hard_simultaneous",
                    "max_epochs": 60,
                    "al": {"outer_iters": 5, "initial_penalty": 2.0},
                    "z_bounds": [-1.0, 1.0],
                },
                "uq": {"enabled": True, "samples": 400, "beta": 0.9},
                "seeds": [3, 1, 4],
            },
        )
        cfg = load_config(path)
        again = write_config(tmp_path, json.loads(config_to_json(cfg)), "again.json")
        assert load_config(again) == cfg

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(CliError, match="'frobnicate'"):
            config_from_dict({"problem": "reactor", "frobnicate": 1})

    def test_unknown_nested_key_names_section(self):
        with pytest.raises(CliError, match="train.al"):
            config_from_dict({"problem": "reactor", "train": {"al": {"growth": 2.0}}})

    def test_missing_problem_rejected(self):
        with pytest.raises(CliError, match="'problem'"):
            config_from_dict({"n_train": 5})

    def test_unknown_problem_rejected(self):
        with pytest.raises(CliError, match="problem"):
            config_from_dict({"problem": "distillation"})

    def test_type_errors_name_the_key(self):
        with pytest.raises(CliError, match="seeds"):
            config_from_dict({"problem": "reactor", "seeds": ["0"]})
        with pytest.raises(CliError, match="model.hidden"):
            config_from_dict({"problem": "reactor", "model": {"hidden": [2.5]}})
        with pytest.raises(CliError, match="uq.enabled"):
            config_from_dict({"problem": "reactor", "uq": {"enabled": 1}})
        with pytest.raises(CliError, match="n_train"):
            config_from_dict({"problem": "reactor", "n_train": True})
        with pytest.raises(CliError, match="train.mode"):
            config_from_dict({"problem": "reactor", "train": {"mode": 3}})

    def test_bounds_checked_at_load(self):
        with pytest.raises(CliError, match="beta"):
            config_from_dict({"problem": "reactor", "uq": {"beta": 1.2}})
        with pytest.raises(CliError, match="samples"):
            config_from_dict({"problem": "reactor", "uq": {"samples": 50}})
        with pytest.raises(CliError, match="topology"):
            config_from_dict({"problem": "reactor", "model": {"topology": "sideways"}})
        with pytest.raises(CliError, match="seeds"):
            config_from_dict({"problem": "reactor", "seeds": []})
        with pytest.raises(CliError, match="seeds"):
            config_from_dict({"problem": "reactor", "seeds": [1, 1]})
        with pytest.raises(CliError, match="seeds"):
            config_from_dict({"problem": "reactor", "seeds": [-2]})

    def test_train_seed_redirected_to_seed_list(self):
        with pytest.raises(CliError, match="seeds"):
            config_from_dict({"problem": "reactor", "train": {"seed": 3}})

    def test_z_bounds_null_or_pair(self):
        cfg = config_from_dict({"problem": "reactor", "train": {"z_bounds": None}})
        assert cfg.train.z_bounds is None
        cfg = config_from_dict({"problem": "reactor", "train": {"z_bounds": [-0.5, 0.5]}})
        assert cfg.train.z_bounds == (-0.5, 0.5)
        with pytest.raises(CliError, match="z_bounds"):
            config_from_dict({"problem": "reactor", "train": {"z_bounds": [1.0]}})

    def test_parse_error_reports_line_and_column(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"problem": "reactor",}', encoding="utf-8")
        with pytest.raises(CliError, match="line 1 column 23"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CliError, match="does not exist"):
            load_config(tmp_path / "nope.json")

    def test_config_to_dict_is_json_clean(self):
        cfg = config_from_dict({"problem": "reactor"})
        data = config_to_dict(cfg)
        json.dumps(data)
        assert "seed" not in data["train"]
        assert data["seeds"] == [0]

    def test_direct_construction_validates(self):
        with pytest.raises(ValueError, match="hidden"):
            ModelSpec(hidden=(0,))
        with pytest.raises(ValueError, match="target_step"):
            ModelSpec(target_step=0.0)
        with pytest.raises(ValueError, match="noise_sigma"):
            ExperimentConfig(problem="reactor", noise_sigma=-0.1)
        with pytest.raises(ValueError, match="epochs"):
            UQSpec(epochs=0)


class TestSeedPrecedence:
    def test_flag_beats_env_beats_config(self, tmp_path, monkeypatch):
        cfg = small_run_config(tmp_path / "unused", seeds=[5])
        path = write_config(tmp_path, cfg)

        out1 = tmp_path / "from_config"
        assert main(["generate-data", "--config", str(path), "--out", str(out1)]) == 0
        assert (out1 / "train_data_5.csv").exists()

        monkeypatch.setenv("PCML_SEED", "7")
        out2 = tmp_path / "from_env"
        assert main(["generate-data", "--config", str(path), "--out", str(out2)]) == 0
        assert (out2 / "train_data_7.csv").exists()
        assert not (out2 / "train_data_5.csv").exists()

        out3 = tmp_path / "from_flag"
        assert main(["generate-data", "--config", str(path), "--out", str(out3), "--seed", "3"]) == 0
        assert (out3 / "train_data_3.csv").exists()

    def test_invalid_env_seed_is_an_error(self, tmp_path, monkeypatch, capsys):
        path = write_config(tmp_path, small_run_config(tmp_path / "o"))
        monkeypatch.setenv("PCML_SEED", "lots")
        assert main(["generate-data", "--config", str(path)]) == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert "PCML_SEED" in record["error"]


class TestGenerateData:
    def test_writes_both_splits_per_seed(self, tmp_path):
        out = tmp_path / "data"
        path = write_config(tmp_path, small_run_config(out, seeds=[0, 2]))
        assert main(["generate-data", "--config", str(path)]) == 0
        for seed in (0, 2):
            train_rows = read_rows(out / f"train_data_{seed}.csv")
            test_rows = read_rows(out / f"test_data_{seed}.csv")
            assert train_rows[0] == ["u0", "y0", "y1", "y2"]
            assert len(train_rows) == 1 + 8
            assert len(test_rows) == 1 + 10
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "generate-data"
        assert manifest["seeds"] == [0, 2]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_run")
    out = tmp / "out"
    path = write_config(tmp, small_run_config(out, seeds=[0, 1]))
    code = main(["run", "--config", str(path)])
    return code, out, path


class TestRunArtifacts:
    def test_exit_zero(self, run_dir):
        code, _, _ = run_dir
        assert code == 0

    def test_manifest_echoes_every_default(self, run_dir):
        _, out, path = run_dir
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"] == config_to_dict(load_config(path))
        assert set(manifest["versions"]) == {"numpy", "pcml", "python"}
        assert manifest["seeds"] == [0, 1]
        for seed in ("0", "1"):
            entry = manifest["results"][seed]
            assert entry["status"] == "ok"
            assert entry["error"] is None
        listed = set(manifest["artifacts"])
        on_disk = {p.name for p in out.iterdir()} - {"run_manifest.json"}
        assert listed == on_disk

    def test_metrics_table_one_row_per_seed(self, run_dir):
        _, out, _ = run_dir
        rows = read_rows(out / "metrics.csv")
        assert rows[0] == [
            "seed",
            "rmse_train",
            "rmse_test",
            "max_violation",
            "mean_violation",
            "coverage95",
            "mean_band_width",
            "termination",
            "wall_time_s",
        ]
        assert [r[0] for r in rows[1:]] == ["0", "1"]
        for row in rows[1:]:
            assert float(row[2]) > 0
            # projected deployment: test-set violation at projection accuracy
            assert float(row[3]) <= 1e-8

    def test_train_report_rows_match_epochs(self, run_dir):
        _, out, _ = run_dir
        rows = read_rows(out / "train_report_0.csv")
        assert rows[0] == ["epoch", "data_loss", "physics_loss", "total_loss", "max_violation"]
        assert len(rows) == 1 + 25

    def test_trajectory_table_shape(self, run_dir):
        _, out, _ = run_dir
        rows = read_rows(out / "trajectory_1.csv")
        assert rows[0] == ["x", "output_index", "truth", "prediction", "measurement", "lower", "upper"]
        n_outputs = 3
        assert len(rows) == 1 + 10 * n_outputs + 8 * n_outputs
        test_rows = [r for r in rows[1:] if r[3] != ""]
        train_rows = [r for r in rows[1:] if r[4] != ""]
        assert len(test_rows) == 10 * n_outputs
        assert len(train_rows) == 8 * n_outputs
        xs = [float(r[0]) for r in test_rows if r[1] == "0"]
        assert xs == sorted(xs)

    def test_plots_are_wellformed_xml(self, run_dir):
        _, out, _ = run_dir
        for name in ("trajectory_0.svg", "loss_0.svg", "trajectory_1.svg", "loss_1.svg"):
            ET.parse(out / name)


class TestRunDeterminism:
    def test_reruns_are_byte_identical_except_wall_time(self, tmp_path):
        out = tmp_path / "out"
        path = write_config(tmp_path, small_run_config(out))
        assert main(["run", "--config", str(path)]) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(["run", "--config", str(path), "--force"]) == 0
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert sorted(first) == sorted(second)
        for name, blob in first.items():
            if name == "metrics.csv":
                a = drop_column([row.split(",") for row in blob.decode().splitlines()], "wall_time_s")
                b = drop_column(
                    [row.split(",") for row in second[name].decode().splitlines()], "wall_time_s"
                )
                assert a == b
            else:
                assert blob == second[name], f"{name} changed between identical runs"


class TestOutputGuard:
    def test_refuses_nonempty_dir_without_force(self, tmp_path, capsys):
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep.txt").write_text("precious")
        path = write_config(tmp_path, small_run_config(out))
        assert main(["run", "--config", str(path)]) == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert "--force" in record["error"]
        assert (out / "keep.txt").read_text() == "precious"

    def test_force_replaces_dir(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "stale.txt").write_text("old")
        path = write_config(tmp_path, small_run_config(out))
        assert main(["run", "--config", str(path), "--force"]) == 0
        assert not (out / "stale.txt").exists()
        assert (out / "metrics.csv").exists()

    def test_failed_write_leaves_no_partial_output(self, tmp_path, monkeypatch):
        out = tmp_path / "out"
        path = write_config(tmp_path, small_run_config(out))

        import pcml.cli as cli_module

        def boom(*args, **kwargs):
            raise RuntimeError("plot backend unavailable")

        monkeypatch.setattr(cli_module, "plot", boom)
        with pytest.raises(RuntimeError):
            main(["run", "--config", str(path)])
        assert not out.exists()
        assert list(tmp_path.glob(".out-stage-*")) == []


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
class TestSeedFailures:
    def test_all_seeds_failing_exits_nonzero_with_record(self, tmp_path, capsys):
        out = tmp_path / "out"
        data = small_run_config(out)
        data["train"] = {"mode": "soft", "learning_rate": 1e200, "max_epochs": 10}
        path = write_config(tmp_path, data)
        assert main(["run", "--config", str(path)]) == 1
        record = json.loads(capsys.readouterr().err.strip())
        assert "failed" in record["error"]
        manifest = json.loads((out / "run_manifest.json").read_text())
        entry = manifest["results"]["0"]
        assert entry["status"] == "failed"
        # either the trainer's divergence check or the tape's overflow guard
        # fires first; both are recorded failures
        assert "Error" in entry["error"]
        rows = read_rows(out / "metrics.csv")
        assert rows[1][0] == "0"
        assert rows[1][-2] == "failed"


@pytest.fixture(scope="module")
def uq_run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_uq")
    out = tmp / "out"
    data = small_run_config(out, seeds=[0])
    data["train"]["max_epochs"] = 20
    data["uq"] = {"enabled": True, "samples": 120, "epochs": 12, "elbo_samples": 3}
    path = write_config(tmp, data)
    code = main(["run", "--config", str(path)])
    return code, out


class TestUQRun:
    def test_bands_artifacts_written(self, uq_run_dir):
        code, out = uq_run_dir
        assert code == 0
        rows = read_rows(out / "bands_0.csv")
        assert rows[0] == ["u0", "output_index", "mean", "lower", "upper"]
        assert len(rows) == 1 + 10 * 3
        ET.parse(out / "bands_0.svg")

    def test_metrics_include_coverage_and_width(self, uq_run_dir):
        _, out = uq_run_dir
        rows = read_rows(out / "metrics.csv")
        header, row = rows[0], rows[1]
        cov = float(row[header.index("coverage95")])
        width = float(row[header.index("mean_band_width")])
        assert 0.0 <= cov <= 1.0
        assert width > 0.0

    def test_trajectory_bands_match_bands_table(self, uq_run_dir):
        _, out = uq_run_dir
        bands = read_rows(out / "bands_0.csv")
        traj = read_rows(out / "trajectory_0.csv")
        by_key = {(r[0], r[1]): r for r in bands[1:]}
        checked = 0
        for row in traj[1:]:
            if row[3] == "":
                continue
            b = by_key[(row[0], row[1])]
            assert (row[3], row[5], row[6]) == (b[2], b[3], b[4])
            checked += 1
        assert checked == 10 * 3


@pytest.fixture(scope="module")
def compare_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_cmp")
    out = tmp / "out"
    data = small_run_config(out, seeds=[0, 1, 2])
    data["n_train"] = 10
    data["train"]["max_epochs"] = 30
    path = write_config(tmp, data)
    code = main(["compare", "--config", str(path)])
    return code, out


class TestCompare:
    def test_comparison_table_one_row_per_seed_per_arm(self, compare_dir):
        code, out = compare_dir
        assert code == 0
        rows = read_rows(out / "comparison.csv")
        assert rows[0][:2] == ["seed", "arm"]
        assert [(r[0], r[1]) for r in rows[1:]] == [
            ("0", "ml"),
            ("0", "pcml"),
            ("1", "ml"),
            ("1", "pcml"),
            ("2", "ml"),
            ("2", "pcml"),
        ]

    def test_constrained_arm_is_feasible_baseline_is_not(self, compare_dir):
        _, out = compare_dir
        rows = read_rows(out / "comparison.csv")
        header = rows[0]
        col = header.index("max_violation")
        for row in rows[1:]:
            violation = float(row[col])
            if row[1] == "pcml":
                assert violation <= 1e-8
            else:
                assert violation > 1e-8

    def test_manifest_tracks_both_arms(self, compare_dir):
        _, out = compare_dir
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "compare"
        for seed in ("0", "1", "2"):
            assert set(manifest["results"][seed]) == {"ml", "pcml"}
            for arm in ("ml", "pcml"):
                assert manifest["results"][seed][arm]["status"] == "ok"


class TestEvaluateCommand:
    def test_summarizes_run_dir(self, run_dir, capsys):
        _, out, _ = run_dir
        assert main(["evaluate", "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["command"] == "run"
        assert summary["problem"] == "reactor"
        assert summary["n_seeds"] == 2
        assert summary["n_ok"] == 2
        assert summary["metrics"]["rmse_test"]["n"] == 2
        assert summary["metrics"]["rmse_test"]["min"] <= summary["metrics"]["rmse_test"]["mean"]

    def test_summarizes_compare_dir_per_arm(self, compare_dir, capsys):
        _, out = compare_dir
        assert main(["evaluate", "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["command"] == "compare"
        assert set(summary["metrics"]) == {"ml", "pcml"}
        assert summary["metrics"]["pcml"]["rmse_test"]["n"] == 3

    def test_missing_manifest_is_an_error(self, tmp_path, capsys):
        assert main(["evaluate", "--out", str(tmp_path)]) == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert "run_manifest.json" in record["error"]


class TestPlot:
    def make_bands_csv(self, tmp_path, width):
        lines = ["u0,output_index,mean,lower,upper"]
        for u in np.linspace(0.0, 1.0, 9):
            u = float(u)
            mean = float(np.sin(u))
            lines.append(f"{u!r},0,{mean!r},{float(mean - width)!r},{float(mean + width)!r}")
        path = tmp_path / "bands.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_zero_width_bands_render(self, tmp_path):
        path = self.make_bands_csv(tmp_path, width=0.0)
        out = tmp_path / "bands.svg"
        plot(path, "bands", out)
        ET.parse(out)

    def test_loss_scale_rule(self, tmp_path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        from pcml.cli import _draw_loss

        positive = {
            "epoch": ["0", "1", "2"],
            "data_loss": ["1.0", "0.5", "0.25"],
            "total_loss": ["2.0", "1.0", "0.5"],
        }
        fig, ax = plt.subplots()
        _draw_loss(ax, positive)
        assert ax.get_yscale() == "log"
        plt.close(fig)

        with_zero = {"epoch": ["0", "1"], "total_loss": ["1.0", "0.0"]}
        fig, ax = plt.subplots()
        _draw_loss(ax, with_zero)
        assert ax.get_yscale() == "linear"
        plt.close(fig)

    def test_loss_plot_from_run(self, run_dir, tmp_path):
        _, out, _ = run_dir
        target = tmp_path / "loss.svg"
        assert main(["plot", "--csv", str(out / "train_report_0.csv"), "--kind", "loss", "--out", str(target)]) == 0
        ET.parse(target)

    def test_repeat_render_is_byte_identical(self, run_dir, tmp_path):
        _, out, _ = run_dir
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        plot(out / "trajectory_0.csv", "trajectory", a)
        plot(out / "trajectory_0.csv", "trajectory", b)
        assert a.read_bytes() == b.read_bytes()

    def test_schema_mismatch_names_missing_column(self, run_dir, tmp_path):
        _, out, _ = run_dir
        with pytest.raises(CliError, match="'epoch'"):
            plot(out / "metrics.csv", "loss", tmp_path / "x.svg")
        with pytest.raises(CliError, match="'u0'"):
            plot(out / "trajectory_0.csv", "bands", tmp_path / "x.svg")

    def test_unknown_kind_rejected(self, tmp_path):
        path = self.make_bands_csv(tmp_path, width=0.1)
        with pytest.raises(CliError, match="kind"):
            plot(path, "histogram", tmp_path / "x.svg")

    def test_missing_csv_rejected(self, tmp_path):
        with pytest.raises(CliError, match="does not exist"):
            plot(tmp_path / "absent.csv", "loss", tmp_path / "x.svg")

    def test_custom_axis_labels(self, tmp_path):
        path = self.make_bands_csv(tmp_path, width=0.1)
        out = tmp_path / "labeled.svg"
        plot(path, "bands", out, xlabel="time t [s]", ylabel="concentration [mol/L]")
        ET.parse(out)


class TestEntryPoint:
    def test_module_help_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "pcml.cli", "--help"],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert proc.returncode == 0
        for name in ("run", "generate-data", "evaluate", "compare", "plot"):
            assert name in proc.stdout

    def test_unsupported_topology_refused_at_run(self, tmp_path, capsys):
        data = small_run_config(tmp_path / "o")
        data["model"]["topology"] = "bidirectional"
        path = write_config(tmp_path, data)
        assert main(["run", "--config", str(path)]) == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert "topology" in record["error"]

    def test_jobs_flag_validated(self, tmp_path, capsys):
        path = write_config(tmp_path, small_run_config(tmp_path / "o"))
        assert main(["run", "--config", str(path), "--jobs", "0"]) == 2
        record = json.loads(capsys.readouterr().err.strip())
        assert "--jobs" in record["error"]

    def test_parallel_jobs_match_serial(self, tmp_path):
        out_serial = tmp_path / "serial"
        out_par = tmp_path / "par"
        base = small_run_config(out_serial, seeds=[0, 1])
        path1 = write_config(tmp_path, base, "serial.json")
        base2 = dict(base, out=str(out_par))
        path2 = write_config(tmp_path, base2, "par.json")
        assert main(["run", "--config", str(path1), "--jobs", "1"]) == 0
        assert main(["run", "--config", str(path2), "--jobs", "2"]) == 0
        for name in ("metrics.csv", "train_report_0.csv", "train_report_1.csv"):
            a = read_rows(out_serial / name)
            b = read_rows(out_par / name)
            if name == "metrics.csv":
                a = drop_column(a, "wall_time_s")
                b = drop_column(b, "wall_time_s")
            assert a == b
