# Licensed under the MIT License.
"""Command-line front end: simulate datasets, train arrays, evaluate and export spectra.

Every command writes a manifest.json next to its outputs. Exit codes: 0 on success, 2 for
configuration errors, 3 for numerical failures.
"""

import copy
import dataclasses
import functools
import logging
import typing
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import torch
import typer
import yaml
from tqdm import tqdm

from .array_model import ArrayParams, nominal_ula
from .errors import (
    ConfigError,
    DegenerateDoAError,
    NormalizationError,
    NumericalError,
)
from .music import AngularGrid, grid_evaluations, music_spectrum
from .scene_io import (
    read_any_array,
    read_dataset,
    write_array,
    write_checkpoint,
    write_csv,
    write_dataset,
    write_manifest,
)
from .signal_sim import DatasetBundle, Scene, SimConfig, generate_dataset, physical_array
from .subspace import noise_subspace_from_snapshots
from .trainer import (
    SUPPORTED_ESTIMATORS,
    TRAIN_REPORT_FIELDS,
    EstimatorLiteral,
    TrainConfig,
    scene_errors,
    train,
)
from .utils import make_generator, print_traceback_on_exception

logger = logging.getLogger(__name__)
typer_app = typer.Typer(pretty_exceptions_enable=False, no_args_is_help=True)

DEFAULT_EXPERIMENT_CONFIG = Path(__file__).parent / "config/experiment/default.yaml"
SweepAxisLiteral = Literal["none", "snr_db", "n_snapshots"]
SUPPORTED_SWEEP_AXES = list(typing.get_args(SweepAxisLiteral))

TRAIN_DATASET = "train.npz"
TEST_DATASET = "test.npz"
NOMINAL_ARRAY = "nominal_array.yaml"
PHYSICAL_ARRAY = "physical_array.yaml"
LEARNED_ARRAY = "learned_array.yaml"
CHECKPOINT = "checkpoint.yaml"
TRAIN_REPORT = "train_report.csv"
EVALUATION = "evaluation.csv"
SPECTRUM = "spectrum.csv"
SEARCH_L = "search_l.csv"

EVALUATION_FIELDS = ["method", "array", "M", "snr_db", "T", "rmspe_deg", "median_deg"]

# Spawn keys below the experiment seed.
_TRAIN_STREAM, _TEST_STREAM = 1, 2


@dataclass
class ExperimentSpec:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_axis: SweepAxisLiteral = "none"
    sweep_values: list[float] = field(default_factory=list)
    estimators: list[EstimatorLiteral] = field(default_factory=lambda: ["music", "diffmusic"])
    n_train_scenes: int = 1000
    n_test_scenes: int = 1000
    num_workers: int = 1
    output_dir: str = "results"

    def __post_init__(self) -> None:
        if self.sweep_axis not in SUPPORTED_SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SUPPORTED_SWEEP_AXES}")
        if self.sweep_axis != "none" and not self.sweep_values:
            raise ConfigError(f"sweep over {self.sweep_axis} needs at least one value")
        unknown = set(self.estimators) - set(SUPPORTED_ESTIMATORS)
        if not self.estimators or unknown:
            raise ConfigError(f"estimators must be a non-empty subset of {SUPPORTED_ESTIMATORS}")
        if self.n_train_scenes < 1 or self.n_test_scenes < 1:
            raise ConfigError("scene counts must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = copy.deepcopy(data)
        sweep = data.pop("sweep", {}) or {}
        try:
            return cls(
                sim=SimConfig(**data.pop("sim", {})),
                train=TrainConfig(**data.pop("train", {})),
                sweep_axis=sweep.get("axis", "none"),
                sweep_values=[float(v) for v in sweep.get("values", [])],
                **data,
            )
        except TypeError as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "train": self.train.to_dict(),
            "sweep": {"axis": self.sweep_axis, "values": list(self.sweep_values)},
            "estimators": list(self.estimators),
            "n_train_scenes": self.n_train_scenes,
            "n_test_scenes": self.n_test_scenes,
            "num_workers": self.num_workers,
            "output_dir": self.output_dir,
        }


def _deep_update(base: dict, overrides: dict) -> dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_experiment(config_path: str | Path | None = None, **flags: typing.Any) -> ExperimentSpec:
    """Packaged defaults, then command-line flags, then the --config file on top.

    Flags are given as dotted keys, e.g. `sim.snr_db=20.0`; flags left at None are ignored.
    """
    with open(DEFAULT_EXPERIMENT_CONFIG) as f:
        data = yaml.safe_load(f)
    for dotted, value in flags.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    if config_path is not None:
        with open(config_path) as f:
            _deep_update(data, yaml.safe_load(f) or {})
    return ExperimentSpec.from_dict(data)


def _parse_list(text: str | None, cast: Callable[[str], typing.Any]) -> list | None:
    if text is None:
        return None
    return [cast(item) for item in text.split(",") if item.strip()]


def exit_codes(func: Callable) -> Callable:
    """Map arraycal errors onto the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            raise typer.Exit(code=2) from e
        except (NumericalError, DegenerateDoAError, NormalizationError) as e:
            logger.error(f"Numerical failure: {e}")
            raise typer.Exit(code=3) from e

    return wrapper


def _prepare_output(spec: ExperimentSpec, output_dir: str | None) -> Path:
    out = Path(output_dir if output_dir is not None else spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _nominal_for(sim: SimConfig) -> ArrayParams:
    return nominal_ula(sim.n_antennas, sim.wavelength, sim.direction)


def _summarize_impairments(nominal: ArrayParams, physical: ArrayParams) -> str:
    dp = (physical.positions - nominal.positions).abs()
    dg = (physical.gains - nominal.gains).abs()
    return (
        f"position offsets mean {float(dp.mean()):.4f} max {float(dp.max()):.4f}, "
        f"gain errors mean {float(dg.mean()):.4f} max {float(dg.max()):.4f}"
    )


def _resolve_arrays(
    spec: ExperimentSpec,
    bundle: DatasetBundle | None,
    physical_path: str | None,
    learned_path: str | None,
) -> dict[str, ArrayParams]:
    """Arrays to compare, keyed by knowledge level: nominal, physical and optionally learned."""
    sim = bundle.config if bundle is not None else spec.sim
    if bundle is not None:
        physical = bundle.physical
    elif physical_path is not None:
        physical = read_any_array(physical_path)
    else:
        _, physical = physical_array(sim, make_generator(sim.seed))
    arrays = {"nominal": _nominal_for(sim), "physical": physical}
    if learned_path is not None:
        arrays["learned"] = read_any_array(learned_path)
    return arrays


@typer_app.callback()
def configure(verbose: bool = typer.Option(False, help="Log at DEBUG level.")) -> None:
    """MUSIC DoA estimation and differentiable array calibration."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)


@typer_app.command()
@exit_codes
@print_traceback_on_exception
def simulate(
    config: str = typer.Option(None, help="yaml file overriding the flags."),
    output_dir: str = typer.Option(None),
    n_antennas: int = typer.Option(None),
    n_sources: int = typer.Option(None),
    n_snapshots: int = typer.Option(None),
    snr_db: float = typer.Option(None),
    n_train_scenes: int = typer.Option(None),
    n_test_scenes: int = typer.Option(None),
    seed: int = typer.Option(None),
) -> None:
    """Draw an impaired array and simulate train and test datasets for it."""
    spec = load_experiment(
        config,
        **{
            "sim.n_antennas": n_antennas,
            "sim.n_sources": n_sources,
            "sim.n_snapshots": n_snapshots,
            "sim.snr_db": snr_db,
            "sim.seed": seed,
            "n_train_scenes": n_train_scenes,
            "n_test_scenes": n_test_scenes,
        },
    )
    out = _prepare_output(spec, output_dir)
    sim = spec.sim
    nominal, physical = physical_array(sim, make_generator(sim.seed))
    train_scenes = generate_dataset(
        sim, physical, spec.n_train_scenes, make_generator(sim.seed, _TRAIN_STREAM), spec.num_workers
    )
    test_scenes = generate_dataset(
        sim, physical, spec.n_test_scenes, make_generator(sim.seed, _TEST_STREAM), spec.num_workers
    )
    write_dataset(out / TRAIN_DATASET, DatasetBundle(sim, physical, train_scenes))
    write_dataset(out / TEST_DATASET, DatasetBundle(sim, physical, test_scenes))
    write_array(out / NOMINAL_ARRAY, nominal)
    write_array(out / PHYSICAL_ARRAY, physical)
    write_manifest(out, "simulate", spec.to_dict(), sim.seed)

    typer.echo(
        f"N={sim.n_antennas} M={sim.n_sources} T={sim.n_snapshots} SNR={sim.snr_db} dB, "
        f"{spec.n_train_scenes} train / {spec.n_test_scenes} test scenes"
    )
    typer.echo(f"Impairments: {_summarize_impairments(nominal, physical)}")


@typer_app.command("train")
@exit_codes
@print_traceback_on_exception
def train_command(
    dataset: str = typer.Option(..., help="Training dataset written by `simulate`."),
    config: str = typer.Option(None, help="yaml file overriding the flags."),
    output_dir: str = typer.Option(None),
    loss: str = typer.Option(None, help="sl_theta, sl_p or ul."),
    epochs: int = typer.Option(None),
    batch_size: int = typer.Option(None),
    lr_gain: float = typer.Option(None),
    lr_pos: float = typer.Option(None),
    window_size: int = typer.Option(None, "--window-size", "-L"),
    tau: float = typer.Option(None),
    optimizer: str = typer.Option(None, help="sgd, momentum or adaptive."),
    patience: int = typer.Option(None),
    seed: int = typer.Option(None),
) -> None:
    """Learn the array parametrization from a dataset, starting at the nominal array."""
    spec = load_experiment(
        config,
        **{
            "train.loss_kind": loss,
            "train.epochs": epochs,
            "train.batch_size": batch_size,
            "train.lr_gain": lr_gain,
            "train.lr_pos": lr_pos,
            "train.window_size": window_size,
            "train.tau": tau,
            "train.optimizer_kind": optimizer,
            "train.patience": patience,
            "train.seed": seed,
        },
    )
    out = _prepare_output(spec, output_dir)
    bundle = read_dataset(dataset)
    nominal = _nominal_for(bundle.config)

    grid_evaluations.reset()
    report = train(bundle.scenes, nominal, spec.train, physical=bundle.physical)
    write_csv(out / TRAIN_REPORT, TRAIN_REPORT_FIELDS, report.rows())
    write_checkpoint(out / CHECKPOINT, report.params, report.best_epoch, spec.train.to_dict())
    write_array(out / LEARNED_ARRAY, report.params)
    write_manifest(
        out, "train", {**spec.to_dict(), "dataset": str(dataset)}, spec.train.seed
    )

    typer.echo(
        f"Trained {report.epochs_run} epochs with {spec.train.loss_kind}, best epoch {report.best_epoch}"
    )
    typer.echo(f"Full-grid spectrum evaluations: {grid_evaluations.count}")
    if report.impairment is not None:
        pos_tol = 0.02 * bundle.config.wavelength
        within = report.impairment.count_within(position_tol=pos_tol, gain_tol=0.05)
        typer.echo(f"Antennas recovered within tolerance: {within}/{nominal.n_antennas}")


def summarize_errors(errors: torch.Tensor) -> dict[str, float]:
    """Mean and median absolute error in degrees. Even counts average the two middle values."""
    return {
        "rmspe_deg": float(errors.mean()),
        "median_deg": float(torch.quantile(errors, 0.5)),
    }


def _evaluation_cells(
    spec: ExperimentSpec, physical: ArrayParams, dataset_scenes: list[Scene] | None
) -> list[tuple[SimConfig, list[Scene]]]:
    """One (config, scenes) pair per sweep value; all cells share the test seed stream."""
    if spec.sweep_axis == "none":
        if dataset_scenes is not None:
            return [(spec.sim, dataset_scenes)]
        values = [None]
    else:
        values = spec.sweep_values

    cells = []
    for value in values:
        sim = spec.sim
        if value is not None:
            cast = int if spec.sweep_axis == "n_snapshots" else float
            sim = dataclasses.replace(sim, **{spec.sweep_axis: cast(value)})
        scenes = generate_dataset(
            sim, physical, spec.n_test_scenes, make_generator(sim.seed, _TEST_STREAM), spec.num_workers
        )
        cells.append((sim, scenes))
    return cells


@typer_app.command()
@exit_codes
@print_traceback_on_exception
def evaluate(
    dataset: str = typer.Option(None, help="Test dataset; without it scenes are simulated."),
    config: str = typer.Option(None, help="yaml file overriding the flags."),
    output_dir: str = typer.Option(None),
    physical: str = typer.Option(None, help="Physical array file, if no dataset is given."),
    learned: str = typer.Option(None, help="Learned array or checkpoint to compare."),
    sweep: str = typer.Option(None, help="none, snr_db or n_snapshots."),
    values: str = typer.Option(None, help="Comma separated sweep values."),
    estimators: str = typer.Option(None, help="Comma separated subset of music,diffmusic."),
    n_test_scenes: int = typer.Option(None),
    window_size: int = typer.Option(None, "--window-size", "-L"),
    tau: float = typer.Option(None),
    seed: int = typer.Option(None),
) -> None:
    """RMSPE of each estimator with each array knowledge, optionally over an SNR or T sweep."""
    spec = load_experiment(
        config,
        **{
            "sweep.axis": sweep,
            "sweep.values": _parse_list(values, float),
            "estimators": _parse_list(estimators, str),
            "n_test_scenes": n_test_scenes,
            "train.window_size": window_size,
            "train.tau": tau,
            "sim.seed": seed,
        },
    )
    out = _prepare_output(spec, output_dir)
    bundle = read_dataset(dataset) if dataset is not None else None
    if bundle is not None:
        spec = dataclasses.replace(spec, sim=bundle.config)
    arrays = _resolve_arrays(spec, bundle, physical, learned)
    grid = spec.train.make_grid()

    cells = _evaluation_cells(spec, arrays["physical"], bundle.scenes if bundle else None)
    rows = []
    for sim, scenes in tqdm(cells, desc="Evaluating sweep cells"):
        for estimator in spec.estimators:
            window = spec.train.window_size if estimator == "diffmusic" else 1
            for name, params in arrays.items():
                errors = scene_errors(
                    scenes, params, estimator, grid, window, spec.train.tau, spec.num_workers
                )
                rows.append(
                    {
                        "method": estimator,
                        "array": name,
                        "M": sim.n_sources,
                        "snr_db": sim.snr_db,
                        "T": sim.n_snapshots,
                        **summarize_errors(errors),
                    }
                )
                logger.info(
                    f"{estimator}/{name} at SNR {sim.snr_db} dB, T={sim.n_snapshots}: "
                    f"{rows[-1]['rmspe_deg']:.4f} deg"
                )
    write_csv(out / EVALUATION, EVALUATION_FIELDS, rows)
    write_manifest(out, "evaluate", spec.to_dict(), spec.sim.seed)
    for row in rows:
        typer.echo(f"{row['method']:>9} {row['array']:>8} {row['snr_db']:>6} {row['T']:>5} {row['rmspe_deg']:.4f}")


@typer_app.command()
@exit_codes
@print_traceback_on_exception
def spectrum(
    dataset: str = typer.Option(..., help="Dataset holding the scene to plot."),
    scene_index: int = typer.Option(0),
    config: str = typer.Option(None, help="yaml file overriding the flags."),
    output_dir: str = typer.Option(None),
    learned: str = typer.Option(None, help="Learned array or checkpoint to include."),
) -> None:
    """Dump MUSIC spectra of one scene for every array knowledge as CSV."""
    spec = load_experiment(config)
    out = _prepare_output(spec, output_dir)
    bundle = read_dataset(dataset)
    if not 0 <= scene_index < len(bundle.scenes):
        raise ConfigError(f"scene index {scene_index} out of range [0, {len(bundle.scenes)})")
    scene = bundle.scenes[scene_index]
    arrays = _resolve_arrays(spec, bundle, None, learned)
    grid = spec.train.make_grid()

    noise = noise_subspace_from_snapshots(scene.snapshots, scene.n_sources)
    columns = {name: music_spectrum(noise, params, grid).values for name, params in arrays.items()}
    angles_deg = torch.rad2deg(grid.angles)
    rows = [
        {"angle_deg": float(angles_deg[i]), **{name: float(v[i]) for name, v in columns.items()}}
        for i in range(len(grid))
    ]
    write_csv(out / SPECTRUM, ["angle_deg", *columns], rows)
    write_manifest(
        out, "spectrum", {**spec.to_dict(), "dataset": dataset, "scene_index": scene_index}, 0
    )
    typer.echo(f"True DoAs (deg): {[round(float(t), 3) for t in torch.rad2deg(scene.thetas)]}")


def search_window_size(
    scenes: list[Scene],
    params: ArrayParams,
    grid: AngularGrid,
    candidates: list[int],
    tau: float = 1.0,
    num_workers: int = 1,
) -> tuple[int, list[dict]]:
    """Evaluate diffMUSIC for each window size. Returns the best L (first on ties) and the table."""
    if not candidates:
        raise ConfigError("need at least one window size candidate")
    rows = []
    for window in tqdm(candidates, desc="Searching window size"):
        errors = scene_errors(scenes, params, "diffmusic", grid, window, tau, num_workers)
        rows.append({"L": window, "rmspe_deg": float(errors.mean())})
    best = min(rows, key=lambda row: row["rmspe_deg"])
    return best["L"], rows


@typer_app.command("search-l")
@exit_codes
@print_traceback_on_exception
def search_l(
    dataset: str = typer.Option(..., help="Validation dataset."),
    candidates: str = typer.Option("1,5,11,21,41", help="Comma separated window sizes."),
    config: str = typer.Option(None, help="yaml file overriding the flags."),
    output_dir: str = typer.Option(None),
    array: str = typer.Option(None, help="Array or checkpoint to use instead of the physical one."),
    tau: float = typer.Option(None),
) -> None:
    """Grid search of the diffMUSIC window size by validation RMSPE."""
    spec = load_experiment(config, **{"train.tau": tau})
    out = _prepare_output(spec, output_dir)
    bundle = read_dataset(dataset)
    params = read_any_array(array) if array is not None else bundle.physical
    window_sizes = _parse_list(candidates, int)
    best, rows = search_window_size(
        bundle.scenes, params, spec.train.make_grid(), window_sizes, spec.train.tau, spec.num_workers
    )
    write_csv(out / SEARCH_L, ["L", "rmspe_deg"], rows)
    write_manifest(
        out, "search-l", {**spec.to_dict(), "dataset": dataset, "candidates": window_sizes}, 0
    )
    typer.echo(f"Best window size L={best}")


def main() -> None:
    typer_app()


if __name__ == "__main__":
    main()
