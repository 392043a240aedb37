import csv
import json
import logging

import pytest
from click.testing import CliRunner

from apcsim.cli import cli


@pytest.fixture(autouse=True)
def detach_log_handlers():
    yield
    logger = logging.getLogger("apcsim")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(cli, [str(a) for a in args])


def update_config(path, **changes):
    data = json.loads(path.read_text())
    data.update(changes)
    path.write_text(json.dumps(data))


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def calibrated_experiment(runner, csv_experiment):
    result = run(runner, "calibrate", "--config", csv_experiment)
    assert result.exit_code == 0, result.output
    return csv_experiment


class TestCommands:
    def test_calibrate_writes_ranges_into_manifest(self, calibrated_experiment):
        out = calibrated_experiment.parent / "out"
        report = json.loads((out / "calibration.json").read_text())
        assert report["range_mode"] == "percentile"
        assert sorted(report["layers"]) == ["0", "2"]
        manifest = json.loads((calibrated_experiment.parent / "model.json").read_text())
        assert sorted(manifest["calibration"]) == ["0", "2"]
        assert (out / "apcsim.log").exists()

    def test_config_is_materialized(self, calibrated_experiment):
        data = json.loads(calibrated_experiment.read_text())
        assert data["optim"]["lam"] == 8.0
        assert data["quant"]["range_mode"] == "percentile"

    def test_eval(self, runner, calibrated_experiment):
        result = run(runner, "eval", "--config", calibrated_experiment, "--energy", 2.0)
        assert result.exit_code == 0, result.output
        metrics = json.loads((calibrated_experiment.parent / "out" / "eval.json").read_text())
        assert metrics["energy_per_mac"] == pytest.approx(2.0)
        assert metrics["total_energy"] == pytest.approx(2.0 * 35)
        assert len(metrics["config_hash"]) == 16
        for key in ("clean_accuracy", "quantized_accuracy", "noisy_accuracy"):
            assert 0.0 <= metrics[key] <= 100.0

    def test_eval_is_reproducible(self, runner, calibrated_experiment):
        out = calibrated_experiment.parent / "out" / "eval.json"
        run(runner, "eval", "--config", calibrated_experiment, "--energy", 0.05)
        first = out.read_bytes()
        run(runner, "eval", "--config", calibrated_experiment, "--energy", 0.05, "--threads", 3)
        assert out.read_bytes() == first

    def test_noise_bits(self, runner, calibrated_experiment):
        result = run(runner, "noise-bits", "--config", calibrated_experiment)
        assert result.exit_code == 0, result.output
        rows = read_csv(calibrated_experiment.parent / "out" / "noise_bits.csv")
        assert [row["layer_id"] for row in rows] == ["0", "2"]
        assert all(float(row["noise_bits"]) > 0 for row in rows)
        summary = json.loads((calibrated_experiment.parent / "out" / "noise_bits.json").read_text())
        assert summary["noise_kind"] == "thermal"

    def test_optimize_then_eval_checkpoint(self, runner, calibrated_experiment):
        result = run(runner, "optimize", "--config", calibrated_experiment, "--budget", 0.5)
        assert result.exit_code == 0, result.output
        out = calibrated_experiment.parent / "out"
        assert len(read_csv(out / "trace.csv")) == 5
        layers = read_csv(out / "layer_energy.csv")
        assert [row["layer"] for row in layers] == ["0", "2"]
        assert (out / "noise_bits_optimized.csv").exists()
        alloc = json.loads((out / "alloc.json").read_text())
        assert alloc["granularity"] == "per_layer"

        result = run(runner, "eval", "--config", calibrated_experiment, "--alloc", out / "alloc.json")
        assert result.exit_code == 0, result.output
        metrics = json.loads((out / "eval.json").read_text())
        assert metrics["total_energy"] == pytest.approx(alloc["total_energy"])

    def test_search(self, runner, calibrated_experiment):
        update_config(calibrated_experiment, search={"rel_tol": 0.2, "bracket": [1e-3, 1e6]})
        result = run(runner, "search", "--config", calibrated_experiment)
        assert result.exit_code == 0, result.output
        rows = read_csv(calibrated_experiment.parent / "out" / "search.csv")
        assert [row["arm"] for row in rows] == ["uniform", "per_layer", "per_channel"]
        energies = [float(row["energy_per_mac"]) for row in rows]
        assert energies[2] <= energies[1] <= energies[0]

    def test_sweep(self, runner, calibrated_experiment):
        result = run(runner, "sweep", "--config", calibrated_experiment, "--variable", "sigma_t",
                     "--grid", "0.005,0.01")
        assert result.exit_code == 0, result.output
        rows = read_csv(calibrated_experiment.parent / "out" / "sweep_sigma_t.csv")
        assert [float(row["value"]) for row in rows] == [0.005, 0.01]

    def test_uniform_energy_sweep(self, runner, calibrated_experiment):
        out = calibrated_experiment.parent / "out"
        for variable in ("E_uniform", "energy"):
            result = run(runner, "sweep", "--config", calibrated_experiment, "--variable", variable, "--grid", "0.5,2")
            assert result.exit_code == 0, result.output
            rows = read_csv(out / "sweep_E_uniform.csv")
            assert [row["variable"] for row in rows] == ["E_uniform", "E_uniform"]

    def test_search_is_reproducible(self, runner, calibrated_experiment):
        update_config(calibrated_experiment, search={"rel_tol": 0.5, "bracket": [1e-3, 1e6]})
        out = calibrated_experiment.parent / "out"
        assert run(runner, "search", "--config", calibrated_experiment).exit_code == 0
        first = (out / "search.json").read_bytes()
        assert run(runner, "search", "--config", calibrated_experiment).exit_code == 0
        assert (out / "search.json").read_bytes() == first

    def test_seed_and_out_overrides(self, runner, calibrated_experiment, tmp_path):
        result = run(runner, "eval", "--config", calibrated_experiment, "--seed", 5, "--out", tmp_path / "other")
        assert result.exit_code == 0, result.output
        assert (tmp_path / "other" / "eval.json").exists()


class TestExitCodes:
    def test_infeasible_search(self, runner, calibrated_experiment):
        update_config(calibrated_experiment, degradation_budget=-150.0, search={"rel_tol": 0.5})
        result = run(runner, "search", "--config", calibrated_experiment)
        assert result.exit_code == 2
        assert (calibrated_experiment.parent / "out" / "search.csv").exists()

    def test_config_error(self, runner, csv_experiment):
        update_config(csv_experiment, colour="blue")
        assert run(runner, "eval", "--config", csv_experiment).exit_code == 3

    def test_missing_config(self, runner, tmp_path):
        assert run(runner, "eval", "--config", tmp_path / "absent.json").exit_code == 3

    def test_missing_energy(self, runner, calibrated_experiment):
        update_config(calibrated_experiment, eval={"energy_per_mac": None})
        result = run(runner, "eval", "--config", calibrated_experiment)
        assert result.exit_code == 3
        assert "no energy given" in result.output

    def test_missing_model(self, runner, csv_experiment):
        update_config(csv_experiment, model="missing.json")
        assert run(runner, "eval", "--config", csv_experiment).exit_code == 4

    def test_data_does_not_fit_preset(self, runner, csv_experiment):
        assert run(runner, "train", "--config", csv_experiment, "--preset", "mlp").exit_code == 4

    def test_empty_sweep_grid(self, runner, calibrated_experiment):
        result = run(runner, "sweep", "--config", calibrated_experiment, "--grid", "")
        assert result.exit_code == 3
        assert "grid is empty" in result.output

    def test_missing_split_fails_before_any_work(self, runner, calibrated_experiment):
        (calibrated_experiment.parent / "test.csv").unlink()
        result = run(runner, "search", "--config", calibrated_experiment)
        assert result.exit_code == 4
        assert "test.csv" in result.output
        assert not (calibrated_experiment.parent / "out" / "search.json").exists()

    def test_missing_split_for_calibrate(self, runner, csv_experiment):
        update_config(csv_experiment, train_data={"path": None})
        assert run(runner, "calibrate", "--config", csv_experiment).exit_code == 3
