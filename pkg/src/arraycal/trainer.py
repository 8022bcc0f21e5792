# Licensed under the MIT License.
"""Stochastic gradient training of the array parametrization, and RMSPE evaluation."""

import logging
import math
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import hydra
import torch
import yaml
from tqdm import tqdm

from .array_model import ArrayParams, ImpairmentErrors, gauge_fix, impairment_errors
from .diffmusic import diffmusic_estimate
from .errors import ConfigError, NumericalError
from .losses import (
    SUPPORTED_LOSSES,
    LossKindLiteral,
    LossValue,
    loss_sl_p,
    loss_sl_theta,
    loss_ul,
    rmspe,
)
from .music import AngularGrid, music_estimate, music_spectrum
from .scene_io import write_checkpoint
from .signal_sim import Scene, split_dataset
from .subspace import noise_subspace_from_snapshots
from .utils import REAL_DTYPE, format_epoch_checkpoint_filename, make_generator

logger = logging.getLogger(__name__)

DEFAULT_OPTIMIZER_CONFIG_DIR = Path(__file__).parent / "config/optimizer/"
OptimizerLiteral = Literal["sgd", "momentum", "adaptive"]
SUPPORTED_OPTIMIZERS = list(typing.get_args(OptimizerLiteral))
EstimatorLiteral = Literal["music", "diffmusic"]
SUPPORTED_ESTIMATORS = list(typing.get_args(EstimatorLiteral))
ValidationMetricLiteral = Literal["auto", "rmspe", "loss"]


@dataclass
class TrainConfig:
    """Training hyperparameters.

    `lr_pos` defaults to `lr_gain * wavelength / 2` of the array being trained, since positions
    are in meters. `validation_metric="auto"` selects on validation loss for sl_p (which then
    never touches the full grid) and for ul (which then never reads DoA labels), and on
    validation RMSPE for sl_theta.
    """

    loss_kind: LossKindLiteral = "sl_p"
    epochs: int = 100
    batch_size: int = 32
    lr_gain: float = 1e-3
    lr_pos: float | None = None
    window_size: int = 21
    tau: float = 1.0
    grid_low_deg: float = -90.0
    grid_high_deg: float = 90.0
    grid_step_deg: float = 0.01
    seed: int = 0
    patience: int | None = None
    optimizer_kind: OptimizerLiteral = "adaptive"
    validation_fraction: float = 0.1
    validation_metric: ValidationMetricLiteral = "auto"
    # Sources to look for in the unsupervised loss; None uses the count stored with each scene.
    n_sources: int | None = None

    def __post_init__(self) -> None:
        if self.loss_kind not in SUPPORTED_LOSSES:
            raise ConfigError(f"loss_kind must be one of {SUPPORTED_LOSSES}, got {self.loss_kind!r}")
        if self.optimizer_kind not in SUPPORTED_OPTIMIZERS:
            raise ConfigError(
                f"optimizer_kind must be one of {SUPPORTED_OPTIMIZERS}, got {self.optimizer_kind!r}"
            )
        if self.validation_metric not in typing.get_args(ValidationMetricLiteral):
            raise ConfigError(f"unknown validation_metric {self.validation_metric!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if not self.lr_gain > 0 or (self.lr_pos is not None and not self.lr_pos > 0):
            raise ConfigError("step sizes must be positive")
        if self.window_size < 1 or not self.tau > 0:
            raise ConfigError("window_size must be >= 1 and tau positive")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be at least 1")

    def make_grid(self) -> AngularGrid:
        return AngularGrid.uniform(self.grid_low_deg, self.grid_high_deg, self.grid_step_deg)

    def resolved_metric(self) -> Literal["rmspe", "loss"]:
        if self.validation_metric != "auto":
            return self.validation_metric
        return "rmspe" if self.loss_kind == "sl_theta" else "loss"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainReport:
    """Per-epoch traces; `params` is the snapshot with the best validation metric."""

    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_rmspe_deg: list[float] = field(default_factory=list)
    wall_s: list[float] = field(default_factory=list)
    params: ArrayParams | None = None
    last_params: ArrayParams | None = None
    best_epoch: int = -1
    impairment: ImpairmentErrors | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.losses)

    @property
    def gauge_fixed_params(self) -> ArrayParams:
        assert self.params is not None, "training produced no parameters"
        return gauge_fix(self.params)

    def rows(self) -> list[dict]:
        return [
            {
                "epoch": epoch,
                "loss": self.losses[epoch],
                "val_loss": self.val_losses[epoch],
                "val_rmspe_deg": self.val_rmspe_deg[epoch],
                "wall_s": self.wall_s[epoch],
            }
            for epoch in range(self.epochs_run)
        ]


TRAIN_REPORT_FIELDS = ["epoch", "loss", "val_loss", "val_rmspe_deg", "wall_s"]


def build_optimizer(
    kind: OptimizerLiteral,
    gains: torch.Tensor,
    positions: torch.Tensor,
    lr_gain: float,
    lr_pos: float,
    optimizer_config_path: str | Path | None = None,
) -> torch.optim.Optimizer:
    """Instantiate the optimizer from its packaged yaml, with one parameter group per kind."""
    if optimizer_config_path is None:
        assert kind in SUPPORTED_OPTIMIZERS, f"optimizer_kind must be one of {SUPPORTED_OPTIMIZERS}"
        optimizer_config_path = DEFAULT_OPTIMIZER_CONFIG_DIR / f"{kind}.yaml"
    with open(optimizer_config_path) as f:
        optimizer_config = yaml.safe_load(f)
    factory = hydra.utils.instantiate(optimizer_config)
    return factory(
        [
            {"params": [gains], "lr": lr_gain},
            {"params": [positions], "lr": lr_pos},
        ]
    )


def compute_loss(
    kind: LossKindLiteral,
    batch: list[Scene],
    params: ArrayParams,
    grid: AngularGrid,
    config: TrainConfig,
) -> LossValue:
    if kind == "sl_theta":
        return loss_sl_theta(batch, params, grid, config.window_size, config.tau)
    if kind == "sl_p":
        return loss_sl_p(batch, params)
    if kind == "ul":
        return loss_ul(batch, params, grid, config.n_sources, config.window_size)
    raise ConfigError(f"loss_kind must be one of {SUPPORTED_LOSSES}, got {kind!r}")


def _estimate(
    scene: Scene,
    params: ArrayParams,
    estimator: EstimatorLiteral,
    grid: AngularGrid,
    window_size: int,
    tau: float,
) -> torch.Tensor:
    m = scene.n_sources
    if estimator == "music":
        return music_estimate(scene.snapshots, m, grid, params)
    noise = noise_subspace_from_snapshots(scene.snapshots, m)
    return diffmusic_estimate(music_spectrum(noise, params, grid), m, window_size, tau).thetas_hat


def scene_errors(
    dataset: list[Scene],
    params: ArrayParams,
    estimator: EstimatorLiteral,
    grid: AngularGrid,
    window_size: int = 1,
    tau: float = 1.0,
    num_workers: int = 1,
) -> torch.Tensor:
    """Per-scene RMSPE in degrees, in dataset order."""
    if estimator not in SUPPORTED_ESTIMATORS:
        raise ConfigError(f"estimator must be one of {SUPPORTED_ESTIMATORS}, got {estimator!r}")

    def _one(scene: Scene) -> float:
        if scene.n_sources == 0:
            return 0.0
        return rmspe(scene.thetas, _estimate(scene, params, estimator, grid, window_size, tau))

    if num_workers <= 1:
        errors = [_one(scene) for scene in dataset]
    else:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            errors = list(pool.map(_one, dataset))
    return torch.rad2deg(torch.tensor(errors, dtype=REAL_DTYPE))


def evaluate(
    dataset: list[Scene],
    params: ArrayParams,
    estimator: EstimatorLiteral,
    grid: AngularGrid,
    window_size: int = 1,
    tau: float = 1.0,
    num_workers: int = 1,
) -> float:
    """Mean RMSPE over the dataset, in degrees."""
    assert dataset, "cannot evaluate on an empty dataset"
    errors = scene_errors(dataset, params, estimator, grid, window_size, tau, num_workers)
    return float(errors.mean())


def _check_finite(loss: LossValue, batch_index: int) -> None:
    if not math.isfinite(loss.value) or not bool(torch.all(torch.isfinite(loss.grad))):
        raise NumericalError(
            f"non-finite loss or gradient at batch {batch_index} (loss={loss.value})",
            batch_index=batch_index,
        )


def train(
    dataset: list[Scene],
    nominal: ArrayParams,
    config: TrainConfig,
    physical: ArrayParams | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainReport:
    """Minimize the configured loss over [Re g, Im g, p], starting from `nominal`.

    Shuffling uses a generator derived from (seed, epoch) and batch terms are summed in scene
    order, so equal inputs give equal reports apart from wall-clock times. With `physical`
    given, the report carries gauge-fixed impairment errors of the selected parameters.
    """
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    unlabelled = sum(s.n_sources == 0 for s in dataset)
    if unlabelled and config.loss_kind != "ul":
        raise ConfigError(
            f"{config.loss_kind} needs true DoAs but {unlabelled} scenes carry none"
        )
    if unlabelled and config.resolved_metric() == "rmspe":
        raise ConfigError("validation RMSPE needs true DoAs; use validation_metric=loss")
    if unlabelled and config.loss_kind == "ul" and config.n_sources is None:
        raise ConfigError("ul on scenes without DoAs needs n_sources in the train config")
    n = nominal.n_antennas
    lr_pos = config.lr_pos if config.lr_pos is not None else config.lr_gain * nominal.wavelength / 2
    grid = config.make_grid()
    train_set, val_set = split_dataset(dataset, config.validation_fraction, config.seed)
    metric = config.resolved_metric()
    logger.info(
        f"Training {config.loss_kind} on {len(train_set)} scenes, validating on {len(val_set)} "
        f"({metric}), {config.epochs} epochs, optimizer {config.optimizer_kind}"
    )

    vector = nominal.to_vector().clone()
    gains = vector[: 2 * n].clone().requires_grad_(True)
    positions = vector[2 * n :].clone().requires_grad_(True)
    optimizer = build_optimizer(config.optimizer_kind, gains, positions, config.lr_gain, lr_pos)

    def current() -> ArrayParams:
        return nominal.with_vector(torch.cat([gains.detach(), positions.detach()]))

    report = TrainReport()
    best_metric = math.inf
    best_params = nominal
    stale_epochs = 0
    batch_index = 0
    for epoch in tqdm(range(config.epochs), desc="Training epochs"):
        start = time.perf_counter()
        order = torch.randperm(len(train_set), generator=make_generator(config.seed, epoch + 1))
        order = order.tolist()
        epoch_loss, n_batches = 0.0, 0
        for offset in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[offset : offset + config.batch_size]]
            try:
                loss = compute_loss(config.loss_kind, batch, current(), grid, config)
            except NumericalError as e:
                if e.batch_index is None:
                    e.batch_index = batch_index
                raise
            _check_finite(loss, batch_index)
            optimizer.zero_grad()
            gains.grad = loss.grad[: 2 * n].clone()
            positions.grad = loss.grad[2 * n :].clone()
            optimizer.step()
            logger.debug(f"epoch {epoch} batch {batch_index}: loss {loss.value:.6g}")
            epoch_loss += loss.value
            n_batches += 1
            batch_index += 1

        params = current()
        val_loss, val_rmspe = math.nan, math.nan
        if val_set:
            val_loss = compute_loss(config.loss_kind, val_set, params, grid, config).value
            if metric == "rmspe":
                val_rmspe = evaluate(val_set, params, "diffmusic", grid, config.window_size, config.tau)
        report.losses.append(epoch_loss / max(n_batches, 1))
        report.val_losses.append(val_loss)
        report.val_rmspe_deg.append(val_rmspe)
        report.wall_s.append(time.perf_counter() - start)

        score = val_rmspe if metric == "rmspe" else val_loss
        if not val_set:
            best_params, report.best_epoch = params, epoch
        elif score < best_metric:
            best_metric, best_params, report.best_epoch = score, params, epoch
            stale_epochs = 0
        else:
            stale_epochs += 1

        if checkpoint_dir is not None:
            write_checkpoint(
                Path(checkpoint_dir) / format_epoch_checkpoint_filename(epoch),
                params,
                epoch,
                config.to_dict(),
            )
        logger.info(
            f"epoch {epoch}: loss {report.losses[-1]:.6g}, val loss {val_loss:.6g}, "
            f"val rmspe {val_rmspe:.4f} deg"
        )
        if config.patience is not None and stale_epochs >= config.patience:
            logger.info(f"No validation improvement for {stale_epochs} epochs, stopping early.")
            break

    report.params = best_params
    report.last_params = current()
    if physical is not None:
        report.impairment = impairment_errors(best_params, physical)
    return report
