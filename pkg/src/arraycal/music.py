# Licensed under the MIT License.
"""
Classical MUSIC: pseudo-spectrum over an angular grid and hard peak picking.

    P(theta | zeta) = 1 / ||U_N^H a_zeta(theta)||_2^2
"""

import logging
import math
import threading
import typing
from dataclasses import dataclass

import torch

from .array_model import ArrayParams, steering_jacobian, steering_matrix
from .errors import ConfigError, DimensionError
from .subspace import NoiseSubspace, noise_subspace_from_snapshots
from .utils import REAL_DTYPE

logger = logging.getLogger(__name__)

# Spectrum values are clamped here; equivalently the denominator is floored at 1 / SPECTRUM_CAP.
SPECTRUM_CAP = 1e12
_UNIFORM_TOL = 1e-12


class EvaluationCounter:
    """Thread-safe count of full-grid spectrum evaluations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def count(self) -> int:
        return self._count


grid_evaluations = EvaluationCounter()


@dataclass(frozen=True, eq=False)
class AngularGrid:
    """Uniform, strictly increasing grid of angles in radians."""

    angles: torch.Tensor

    def __post_init__(self) -> None:
        angles = torch.as_tensor(self.angles, dtype=REAL_DTYPE).reshape(-1)
        if angles.numel() < 2:
            raise ConfigError("an angular grid needs at least 2 points")
        steps = angles[1:] - angles[:-1]
        if not torch.all(steps > 0):
            raise ConfigError("grid angles must be strictly increasing")
        if float((steps - steps.mean()).abs().max()) > _UNIFORM_TOL:
            raise ConfigError("grid angles must be uniformly spaced")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def uniform(
        cls, low_deg: float = -90.0, high_deg: float = 90.0, step_deg: float = 0.01
    ) -> "AngularGrid":
        """Grid from low to high (both included) with the given step, in degrees."""
        if not (high_deg > low_deg and step_deg > 0):
            raise ConfigError(f"invalid grid [{low_deg}, {high_deg}] with step {step_deg}")
        n_points = int(round((high_deg - low_deg) / step_deg)) + 1
        return cls(
            torch.linspace(math.radians(low_deg), math.radians(high_deg), n_points, dtype=REAL_DTYPE)
        )

    def __len__(self) -> int:
        return int(self.angles.numel())

    @property
    def step(self) -> float:
        return float(self.angles[1] - self.angles[0])

    def index_of(self, angle: float) -> int:
        """Index of the grid angle nearest to `angle`."""
        return int(torch.argmin((self.angles - angle).abs()))


@dataclass(frozen=True, eq=False)
class Spectrum:
    """MUSIC pseudo-spectrum on a grid. `clamped` is set if any value hit SPECTRUM_CAP."""

    grid: AngularGrid
    values: torch.Tensor
    clamped: bool = False


@dataclass(frozen=True, eq=False)
class Peaks:
    """Selected peaks, ordered by descending spectrum value.

    `degraded` is set when fewer than m local maxima existed and the selection was padded
    with the largest non-peak grid values.
    """

    indices: torch.Tensor
    angles: torch.Tensor
    degraded: bool = False


def _denominators(noise: NoiseSubspace, steering: torch.Tensor) -> torch.Tensor:
    """||U_N^H a||^2 for each column of `steering` ([N, K])."""
    projected = noise.basis.conj().T @ steering
    return (projected.real**2 + projected.imag**2).sum(dim=0)


def _invert(denominators: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns the clamped spectrum values and a mask of the entries that were clamped."""
    floor = 1.0 / SPECTRUM_CAP
    clamped = denominators < floor
    return 1.0 / torch.clamp(denominators, min=floor), clamped


def music_spectrum(noise: NoiseSubspace, params: ArrayParams, grid: AngularGrid) -> Spectrum:
    """Evaluate the MUSIC spectrum on every grid angle."""
    grid_evaluations.increment()
    values, clamped = _invert(_denominators(noise, steering_matrix(params, grid.angles)))
    if bool(clamped.any()):
        logger.debug(f"{int(clamped.sum())} spectrum values clamped at {SPECTRUM_CAP:.0e}")
    return Spectrum(grid=grid, values=values, clamped=bool(clamped.any()))


def spectrum_at(
    noise: NoiseSubspace, params: ArrayParams, thetas: typing.Sequence[float] | torch.Tensor
) -> torch.Tensor:
    """MUSIC spectrum at arbitrary (off-grid) angles."""
    thetas = torch.as_tensor(thetas, dtype=REAL_DTYPE).reshape(-1)
    if thetas.numel() == 0:
        return torch.zeros(0, dtype=REAL_DTYPE)
    values, _ = _invert(_denominators(noise, steering_matrix(params, thetas)))
    return values


def spectrum_gradient(
    noise: NoiseSubspace, params: ArrayParams, thetas: typing.Sequence[float] | torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Spectrum values [K] and their gradients [K, 3N] with respect to [Re g, Im g, p].

    U_N is a function of the data only and is held constant. With D = ||U_N^H a||^2 and the
    projector Pi = U_N U_N^H, dD/dzeta = 2 Re((Pi a)^H da/dzeta) and dP/dzeta = -P^2 dD/dzeta.
    Clamped entries are constant and get a zero gradient.
    """
    thetas = torch.as_tensor(thetas, dtype=REAL_DTYPE).reshape(-1)
    n_params = 3 * params.n_antennas
    if thetas.numel() == 0:
        return torch.zeros(0, dtype=REAL_DTYPE), torch.zeros(0, n_params, dtype=REAL_DTYPE)
    a = steering_matrix(params, thetas)  # [N, K]
    values, clamped = _invert(_denominators(noise, a))
    projected = noise.project(a).T  # [K, N]
    jac = steering_jacobian(params, thetas).stacked()  # [K, N, 3N]
    d_denominator = 2 * torch.einsum("kn,knp->kp", projected.conj(), jac).real
    grad = -(values**2)[:, None] * d_denominator
    grad[clamped] = 0.0
    return values, grad


def find_peaks(spectrum: Spectrum, m: int) -> Peaks:
    """Pick the m largest local maxima of the spectrum.

    A local maximum is strictly greater than both neighbours; an endpoint only needs to beat its
    single neighbour. Ties in value keep the lower grid index first.
    """
    values = spectrum.values
    n = values.numel()
    if m < 1:
        raise DimensionError(f"need at least one peak, got m={m}")
    if m > n:
        raise DimensionError(f"cannot pick {m} peaks from a grid of {n} points")

    padded = torch.cat([values.new_full((1,), -math.inf), values, values.new_full((1,), -math.inf)])
    is_peak = (values > padded[:-2]) & (values > padded[2:])
    peak_idx = torch.nonzero(is_peak).reshape(-1)
    order = torch.sort(values[peak_idx], descending=True, stable=True).indices
    selected = peak_idx[order][:m]

    degraded = selected.numel() < m
    if degraded:
        logger.warning(
            f"only {selected.numel()} local maxima for {m} sources, padding with top grid values"
        )
        rest = torch.nonzero(~is_peak).reshape(-1)
        rest_order = torch.sort(values[rest], descending=True, stable=True).indices
        selected = torch.cat([selected, rest[rest_order][: m - selected.numel()]])

    return Peaks(indices=selected, angles=spectrum.grid.angles[selected], degraded=degraded)


def music_estimate(
    x: torch.Tensor, m: int, grid: AngularGrid, params: ArrayParams
) -> torch.Tensor:
    """Classical MUSIC end to end. Returns m grid angles sorted ascending."""
    noise = noise_subspace_from_snapshots(x, m)
    peaks = find_peaks(music_spectrum(noise, params, grid), m)
    return torch.sort(peaks.angles).values
