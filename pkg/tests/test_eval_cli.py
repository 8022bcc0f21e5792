# Licensed under the MIT License.
import copy
import json
from pathlib import Path

import pytest
import torch
import yaml
from typer.testing import CliRunner

from arraycal.errors import ConfigError
from arraycal.eval_cli import (
    EVALUATION_FIELDS,
    load_experiment,
    search_window_size,
    summarize_errors,
    typer_app,
)
from arraycal.music import AngularGrid
from arraycal.scene_io import read_array, read_csv, read_dataset
from arraycal.trainer import TRAIN_REPORT_FIELDS
from arraycal.utils import REAL_DTYPE

runner = CliRunner()

TINY_EXPERIMENT = {
    "sim": {"n_antennas": 6, "n_sources": 2, "n_snapshots": 20, "snr_db": 20.0, "seed": 5},
    "train": {
        "epochs": 2,
        "batch_size": 2,
        "grid_step_deg": 1.0,
        "window_size": 3,
        "validation_fraction": 0.25,
        "lr_gain": 1.0e-02,
    },
    "n_train_scenes": 6,
    "n_test_scenes": 3,
}


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_EXPERIMENT))
    return path


@pytest.fixture
def simulated(tmp_path: Path, tiny_config: Path) -> Path:
    out = tmp_path / "sim"
    result = runner.invoke(typer_app, ["simulate", "--config", str(tiny_config), "--output-dir", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_load_experiment_layers():
    spec = load_experiment(**{"sim.snr_db": 5.0, "train.epochs": None})
    assert spec.sim.snr_db == 5.0
    assert spec.train.epochs == 100
    assert spec.train.grid_step_deg == 0.01


def test_config_file_wins_over_flags(tiny_config):
    spec = load_experiment(tiny_config, **{"sim.n_antennas": 12, "sim.n_snapshots": 7})
    assert spec.sim.n_antennas == 6
    assert spec.sim.n_snapshots == 20
    assert spec.n_train_scenes == 6


def test_unknown_config_key_is_a_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"sim": {"n_antenas": 4}}))
    with pytest.raises(ConfigError):
        load_experiment(path)


def test_simulate_writes_outputs(simulated):
    for name in ["train.npz", "test.npz", "nominal_array.yaml", "physical_array.yaml", "manifest.json"]:
        assert (simulated / name).exists()
    bundle = read_dataset(simulated / "train.npz")
    assert len(bundle.scenes) == 6
    assert bundle.scenes[0].snapshots.shape == (6, 20)
    assert read_array(simulated / "nominal_array.yaml").n_antennas == 6
    assert json.loads((simulated / "manifest.json").read_text())["command"] == "simulate"


def test_simulate_is_reproducible(tmp_path, tiny_config, simulated):
    again = tmp_path / "again"
    result = runner.invoke(typer_app, ["simulate", "--config", str(tiny_config), "--output-dir", str(again)])
    assert result.exit_code == 0, result.output
    for name in ["train.npz", "test.npz", "physical_array.yaml"]:
        assert (again / name).read_bytes() == (simulated / name).read_bytes()


def test_simulate_rejects_too_many_sources(tmp_path):
    result = runner.invoke(
        typer_app,
        ["simulate", "--n-antennas", "4", "--n-sources", "4", "--output-dir", str(tmp_path)],
    )
    assert result.exit_code == 2


@pytest.mark.parametrize("loss", ["sl_theta", "sl_p", "ul"])
def test_train_command(loss, tmp_path, tiny_config, simulated):
    out = tmp_path / f"train_{loss}"
    result = runner.invoke(
        typer_app,
        [
            "train",
            "--dataset",
            str(simulated / "train.npz"),
            "--config",
            str(tiny_config),
            "--output-dir",
            str(out),
            "--loss",
            loss,
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "train_report.csv")
    assert len(rows) == 2
    assert list(rows[0]) == TRAIN_REPORT_FIELDS
    assert read_array(out / "learned_array.yaml").n_antennas == 6
    assert (out / "checkpoint.yaml").exists()
    assert (out / "manifest.json").exists()
    assert "Antennas recovered within tolerance" in result.output
    if loss == "sl_p":
        assert "Full-grid spectrum evaluations: 0" in result.output


def test_train_rejects_unknown_loss(tmp_path, tiny_config, simulated):
    result = runner.invoke(
        typer_app,
        [
            "train",
            "--dataset",
            str(simulated / "train.npz"),
            "--config",
            str(tiny_config),
            "--output-dir",
            str(tmp_path / "bad"),
            "--loss",
            "l2",
        ],
    )
    assert result.exit_code == 2


def test_evaluate_with_dataset_and_learned_array(tmp_path, tiny_config, simulated):
    out = tmp_path / "eval"
    result = runner.invoke(
        typer_app,
        [
            "evaluate",
            "--dataset",
            str(simulated / "test.npz"),
            "--config",
            str(tiny_config),
            "--output-dir",
            str(out),
            "--learned",
            str(simulated / "physical_array.yaml"),
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "evaluation.csv")
    assert list(rows[0]) == EVALUATION_FIELDS
    assert {(r["method"], r["array"]) for r in rows} == {
        (method, array)
        for method in ["music", "diffmusic"]
        for array in ["nominal", "physical", "learned"]
    }
    by_key = {(r["method"], r["array"]): r for r in rows}
    assert by_key["music", "learned"]["rmspe_deg"] == by_key["music", "physical"]["rmspe_deg"]


def test_evaluate_snr_sweep(tmp_path, tiny_config):
    out = tmp_path / "sweep"
    result = runner.invoke(
        typer_app,
        [
            "evaluate",
            "--config",
            str(tiny_config),
            "--output-dir",
            str(out),
            "--sweep",
            "snr_db",
            "--values",
            "0,20",
            "--estimators",
            "music",
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "evaluation.csv")
    assert len(rows) == 4
    assert sorted({float(r["snr_db"]) for r in rows}) == [0.0, 20.0]


def test_spectrum_command(tmp_path, tiny_config, simulated):
    out = tmp_path / "spectrum"
    result = runner.invoke(
        typer_app,
        [
            "spectrum",
            "--dataset",
            str(simulated / "test.npz"),
            "--config",
            str(tiny_config),
            "--output-dir",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "spectrum.csv")
    assert len(rows) == 181
    assert list(rows[0]) == ["angle_deg", "nominal", "physical"]
    assert float(rows[0]["angle_deg"]) == pytest.approx(-90.0)


def test_spectrum_rejects_bad_scene_index(tmp_path, tiny_config, simulated):
    result = runner.invoke(
        typer_app,
        [
            "spectrum",
            "--dataset",
            str(simulated / "test.npz"),
            "--scene-index",
            "99",
            "--config",
            str(tiny_config),
            "--output-dir",
            str(tmp_path / "bad"),
        ],
    )
    assert result.exit_code == 2


def test_search_l_command(tmp_path, tiny_config, simulated):
    out = tmp_path / "search"
    result = runner.invoke(
        typer_app,
        [
            "search-l",
            "--dataset",
            str(simulated / "test.npz"),
            "--candidates",
            "1,3,5",
            "--config",
            str(tiny_config),
            "--output-dir",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "search_l.csv")
    assert [int(r["L"]) for r in rows] == [1, 3, 5]
    assert "Best window size L=" in result.output


def test_search_window_size_prefers_first_on_ties(simulated):
    bundle = read_dataset(simulated / "test.npz")
    grid = AngularGrid.uniform(-90.0, 90.0, 1.0)
    best, rows = search_window_size(bundle.scenes, bundle.physical, grid, [1, 1])
    assert best == 1
    assert rows[0]["rmspe_deg"] == rows[1]["rmspe_deg"]
    with pytest.raises(ConfigError):
        search_window_size(bundle.scenes, bundle.physical, grid, [])


def test_median_averages_the_middle_pair():
    summary = summarize_errors(torch.tensor([1.0, 2.0, 3.0, 10.0], dtype=REAL_DTYPE))
    assert summary == {"rmspe_deg": 4.0, "median_deg": 2.5}


def test_supervised_training_on_unlabelled_scenes_exits_with_config_error(tmp_path):
    experiment = copy.deepcopy(TINY_EXPERIMENT)
    experiment["sim"]["n_sources"] = 0
    config = tmp_path / "unlabelled.yaml"
    config.write_text(yaml.safe_dump(experiment))
    out = tmp_path / "sim"
    result = runner.invoke(typer_app, ["simulate", "--config", str(config), "--output-dir", str(out)])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        typer_app,
        [
            "train",
            "--dataset",
            str(out / "train.npz"),
            "--config",
            str(config),
            "--output-dir",
            str(tmp_path / "train"),
            "--loss",
            "sl_p",
        ],
    )
    assert result.exit_code == 2
