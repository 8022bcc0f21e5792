# Licensed under the MIT License.
"""
Differentiable MUSIC.

Peaks are found on the grid exactly as in classical MUSIC. Around each peak a fixed window of
L grid angles is cut out and the estimate is the softmax-weighted mean of those angles:

    theta_hat_i = sum_j theta_j * softmax(P(theta_mask_i | zeta) / tau)_j

Peak positions and masks are constants for differentiation; only the spectrum values inside
the masks carry gradient with respect to zeta.
"""

import logging
from dataclasses import dataclass

import torch

from .array_model import ArrayParams
from .errors import ConfigError
from .music import AngularGrid, Spectrum, find_peaks, music_spectrum, spectrum_gradient
from .subspace import NoiseSubspace, noise_subspace_from_snapshots

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AngularMask:
    """Contiguous window of grid points around a spectrum peak."""

    center_index: int
    indices: torch.Tensor
    angles: torch.Tensor

    def __len__(self) -> int:
        return int(self.indices.numel())


@dataclass(frozen=True, eq=False)
class DiffEstimate:
    """Off-grid DoA estimates in ascending order, with the mask and softmax weights behind each."""

    thetas_hat: torch.Tensor
    masks: list[AngularMask]
    weights: list[torch.Tensor]
    degraded: bool = False


def _check_window(window_size: int, tau: float | None = None) -> None:
    if window_size < 1:
        raise ConfigError(f"window size L must be at least 1, got {window_size}")
    if tau is not None and not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")


def mask_at_index(grid: AngularGrid, center_index: int, window_size: int) -> AngularMask:
    """Window of `window_size` points centered at `center_index`, clipped at the grid ends.

    For even sizes the extra point goes to the high-angle side.
    """
    _check_window(window_size)
    low = max(0, center_index - (window_size - 1) // 2)
    high = min(len(grid) - 1, center_index + window_size // 2)
    indices = torch.arange(low, high + 1)
    return AngularMask(center_index=center_index, indices=indices, angles=grid.angles[indices])


def make_mask(grid: AngularGrid, peak_angle: float, window_size: int) -> AngularMask:
    return mask_at_index(grid, grid.index_of(peak_angle), window_size)


def diffmusic_estimate(spectrum: Spectrum, m: int, window_size: int, tau: float = 1.0) -> DiffEstimate:
    """Softmax refinement of the m strongest spectrum peaks. tau = 1 is the plain softmax."""
    _check_window(window_size, tau)
    peaks = find_peaks(spectrum, m)
    masks, weights, thetas = [], [], []
    for center in peaks.indices.tolist():
        mask = mask_at_index(spectrum.grid, center, window_size)
        w = torch.softmax(spectrum.values[mask.indices] / tau, dim=0)
        masks.append(mask)
        weights.append(w)
        thetas.append(torch.dot(mask.angles, w))

    thetas_hat, order = torch.sort(torch.stack(thetas))
    return DiffEstimate(
        thetas_hat=thetas_hat,
        masks=[masks[i] for i in order.tolist()],
        weights=[weights[i] for i in order.tolist()],
        degraded=peaks.degraded,
    )


def mask_spectrum_gradients(
    noise: NoiseSubspace, params: ArrayParams, masks: list[AngularMask]
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Spectrum values and [L_i, 3N] gradients over each mask, evaluated in one pass."""
    if not masks:
        return []
    values, grads = spectrum_gradient(noise, params, torch.cat([mask.angles for mask in masks]))
    sizes = [len(mask) for mask in masks]
    return list(zip(torch.split(values, sizes), torch.split(grads, sizes)))


def estimate_gradient(
    x: torch.Tensor,
    params: ArrayParams,
    grid: AngularGrid,
    m: int,
    window_size: int,
    tau: float = 1.0,
) -> tuple[DiffEstimate, torch.Tensor]:
    """diffMUSIC estimates from snapshots and d theta_hat_i / d zeta, shape [m, 3N].

    The softmax gives d theta_hat / d P_j = w_j (theta_j - theta_hat) / tau, which is chained
    with the spectrum gradients at the mask angles.
    """
    noise = noise_subspace_from_snapshots(x, m)
    estimate = diffmusic_estimate(music_spectrum(noise, params, grid), m, window_size, tau)
    per_mask = mask_spectrum_gradients(noise, params, estimate.masks)

    grads = []
    for mask, w, theta_hat, (_, d_spectrum) in zip(
        estimate.masks, estimate.weights, estimate.thetas_hat, per_mask
    ):
        d_theta_d_values = w * (mask.angles - theta_hat) / tau
        grads.append(d_theta_d_values @ d_spectrum)
    return estimate, torch.stack(grads)
