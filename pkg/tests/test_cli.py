"""CLI: verbs, config plumbing, exit codes."""

import numpy as np
import pytest
import yaml

import pdmicro.cli as cli
from pdmicro.cli import main
from pdmicro.experiments import TooManyTrialFailures
from pdmicro.stack_io import load_stack


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture
def simulate_config(tmp_path):
    return write_yaml(tmp_path / "sim.yaml", {
        "object": {"canvas_size": 128, "margin_fraction": 0.35, "seed": 3},
        "optical": {"grid_size": 64},
        "noise": {"photons_per_pixel": 500.0},
        "target_wrms": 0.5,
    })


@pytest.fixture
def stack_dir(tmp_path, simulate_config):
    out = tmp_path / "stack"
    code = main(["simulate", "--config", str(simulate_config),
                 "--seed", "5", "--out", str(out)])
    assert code == 0
    return out


class TestUsageErrors:
    def test_no_verb_is_config_error(self):
        assert main([]) == 1

    def test_unknown_verb_is_config_error(self):
        assert main(["transmogrify"]) == 1

    def test_bad_estimator_choice(self, stack_dir):
        assert main(["estimate", str(stack_dir), "--estimator", "quickest"]) == 1

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--help"])
        assert info.value.code == 0
        assert "simulate" in capsys.readouterr().out


class TestSimulate:
    def test_writes_loadable_stack(self, stack_dir):
        stack = load_stack(stack_dir)
        assert stack.k == 3
        assert stack.config.grid_size == 64
        assert stack.truth is not None
        assert stack.seed == 5
        assert sorted(p.name for p in stack_dir.glob("*.tif")) == [
            "plane_00.tif", "plane_01.tif", "plane_02.tif"]

    def test_seed_reproducibility(self, tmp_path, simulate_config):
        for name in ("a", "b"):
            assert main(["simulate", "--config", str(simulate_config),
                         "--seed", "9", "--out", str(tmp_path / name)]) == 0
        a = load_stack(tmp_path / "a")
        b = load_stack(tmp_path / "b")
        assert np.array_equal(a.images, b.images)

    def test_requires_config_and_out(self, tmp_path, simulate_config):
        assert main(["simulate", "--out", str(tmp_path / "x")]) == 1
        assert main(["simulate", "--config", str(simulate_config)]) == 1

    def test_unknown_config_key_rejected(self, tmp_path):
        bad = write_yaml(tmp_path / "bad.yaml", {"objective": {}})
        assert main(["simulate", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.yaml"),
                     "--out", str(tmp_path / "x")]) == 1


class TestEstimate:
    def test_reports_for_both_estimators(self, stack_dir, tmp_path):
        opts = write_yaml(tmp_path / "opts.yaml", {
            "gaussian_options": {"max_iterations": 8},
            "poisson_options": {"max_outer_iterations": 8},
        })
        out = tmp_path / "reports"
        assert main(["estimate", str(stack_dir), "--config", str(opts),
                     "--out", str(out)]) == 0
        for name in ("gaussian", "poisson"):
            report = (out / f"report_{name}.txt").read_text()
            assert "c_radians" in report and "c_waves" in report
            assert "rwe_waves:" in report  # truth travels with the stack
            assert (out / f"trace_{name}.csv").exists()

    def test_single_estimator_selection(self, stack_dir, tmp_path):
        opts = write_yaml(tmp_path / "opts.yaml",
                          {"gaussian_options": {"max_iterations": 5}})
        out = tmp_path / "g_only"
        assert main(["estimate", str(stack_dir), "--config", str(opts),
                     "--estimator", "gaussian", "--out", str(out)]) == 0
        assert (out / "report_gaussian.txt").exists()
        assert not (out / "report_poisson.txt").exists()

    def test_missing_stack_dir(self, tmp_path):
        assert main(["estimate", str(tmp_path / "absent")]) == 1


class TestSweepAndPlot:
    @pytest.fixture
    def sweep_config(self, tmp_path):
        return write_yaml(tmp_path / "sweep.yaml", {
            "kind": "single",
            "axis": [0.5],
            "trials": 1,
            "estimator": "gaussian",
            "object_spec": {"canvas_size": 128, "margin_fraction": 0.35, "seed": 3},
            "optical": {"grid_size": 64},
            "noise": {"photons_per_pixel": 500.0},
            "target_wrms": 0.5,
            "gaussian_options": {"max_iterations": 6},
        })

    def test_sweep_runs_and_resumes(self, sweep_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["sweep", "--config", str(sweep_config),
                     "--out", str(out)]) == 0
        assert (out / "raw.csv").exists()
        assert (out / "aggregate_rwe.png").exists()
        first = capsys.readouterr().out
        assert "mean_rwe=" in first
        # second invocation resumes from trial files
        assert main(["sweep", "--config", str(sweep_config),
                     "--out", str(out)]) == 0

    def test_sweep_requires_out(self, sweep_config):
        assert main(["sweep", "--config", str(sweep_config)]) == 1

    def test_bad_kind_is_config_error(self, tmp_path):
        cfg = write_yaml(tmp_path / "bad.yaml", {"kind": "sideways", "axis": [1.0]})
        assert main(["sweep", "--config", str(cfg),
                     "--out", str(tmp_path / "x")]) == 1

    def test_correct_verb_rejects_other_kind(self, tmp_path):
        cfg = write_yaml(tmp_path / "k.yaml", {"kind": "abmag-sweep",
                                               "axis": [0.5]})
        assert main(["correct", "--config", str(cfg),
                     "--out", str(tmp_path / "x")]) == 1

    def test_plot_from_existing_csv(self, sweep_config, tmp_path):
        out = tmp_path / "run2"
        assert main(["sweep", "--config", str(sweep_config),
                     "--out", str(out)]) == 0
        plots = tmp_path / "plots"
        assert main(["plot", str(out / "aggregate.csv"),
                     "--out", str(plots)]) == 0
        assert (plots / "aggregate_rwe.png").exists()

    def test_plot_missing_csv(self, tmp_path):
        assert main(["plot", str(tmp_path / "ghost.csv"),
                     "--out", str(tmp_path)]) == 1


class TestExitCodes:
    def test_trial_failure_budget_exit_code(self, tmp_path, monkeypatch):
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "single", "axis": [0.5]})

        def explode(config):
            raise TooManyTrialFailures("3 of 20 trials failed")

        monkeypatch.setattr(cli, "run_experiment", explode)
        assert main(["sweep", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 3

    def test_unexpected_exception_exit_code(self, tmp_path, monkeypatch):
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "single", "axis": [0.5]})

        def explode(config):
            raise MemoryError("synthetic")

        monkeypatch.setattr(cli, "run_experiment", explode)
        assert main(["sweep", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
