# Licensed under the MIT License.
"""
Training objectives over the array parametrization, each returned with its analytic gradient.

- ``sl_theta``: RMSPE between true DoAs and diffMUSIC estimates (supervised).
- ``sl_p``: negative MUSIC spectrum at the true DoAs (supervised, no grid search).
- ``ul``: Jain's index of the spectrum inside each peak mask (unsupervised).

Gradients are with respect to the real vector [Re g, Im g, p] of length 3N. Batch reductions
always sum per-scene terms in scene order.
"""

import functools
import itertools
import logging
import math
import typing
from dataclasses import dataclass
from typing import Literal

import torch
from scipy.optimize import linear_sum_assignment

from .array_model import ArrayParams
from .diffmusic import estimate_gradient, mask_at_index, mask_spectrum_gradients
from .errors import DimensionError, NumericalError
from .music import AngularGrid, find_peaks, music_spectrum, spectrum_gradient
from .signal_sim import Scene
from .subspace import noise_subspace_from_snapshots
from .utils import REAL_DTYPE

logger = logging.getLogger(__name__)

LossKindLiteral = Literal["sl_theta", "sl_p", "ul"]
SUPPORTED_LOSSES = list(typing.get_args(LossKindLiteral))

# Largest source count for which all M! pairings are enumerated.
MAX_EXHAUSTIVE_SOURCES = 8


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    grad: torch.Tensor  # [3N]


def mod_pi(delta: float | torch.Tensor) -> torch.Tensor:
    """Wrap angles into (-pi/2, pi/2] by removing the nearest multiple of pi."""
    delta = torch.as_tensor(delta, dtype=REAL_DTYPE)
    return delta - math.pi * torch.ceil(delta / math.pi - 0.5)


@functools.lru_cache(maxsize=MAX_EXHAUSTIVE_SOURCES + 1)
def _all_permutations(m: int) -> torch.Tensor:
    # itertools yields permutations in lexicographic order
    return torch.tensor(list(itertools.permutations(range(m))), dtype=torch.long).reshape(-1, m)


def _as_pair(truth, estimate) -> tuple[torch.Tensor, torch.Tensor]:
    truth = torch.as_tensor(truth, dtype=REAL_DTYPE).reshape(-1)
    estimate = torch.as_tensor(estimate, dtype=REAL_DTYPE).reshape(-1)
    if truth.numel() != estimate.numel():
        raise DimensionError(
            f"truth has {truth.numel()} angles but the estimate has {estimate.numel()}"
        )
    return truth, estimate


def best_permutation(truth, estimate) -> torch.Tensor:
    """Pairing that minimizes the wrapped squared error: truth[i] goes with estimate[perm[i]].

    Ties resolve to the lexicographically first permutation. Beyond MAX_EXHAUSTIVE_SOURCES the
    pairing is solved as a linear assignment, which is exact since the cost is a sum over pairs.
    """
    truth, estimate = _as_pair(truth, estimate)
    m = truth.numel()
    cost = mod_pi(truth[:, None] - estimate[None, :]) ** 2  # [M, M]
    if m > MAX_EXHAUSTIVE_SOURCES:
        _, cols = linear_sum_assignment(cost.numpy())
        return torch.as_tensor(cols, dtype=torch.long)
    perms = _all_permutations(m)
    totals = cost[torch.arange(m), perms].sum(dim=1)
    # argmin returns the first minimal entry, i.e. the lexicographically first permutation
    return perms[int(torch.argmin(totals))]


def rmspe_with_grad(truth, estimate) -> tuple[float, torch.Tensor]:
    """RMSPE in radians and its gradient with respect to `estimate`, with the pairing held fixed."""
    truth, estimate = _as_pair(truth, estimate)
    m = truth.numel()
    if m == 0:
        return 0.0, torch.zeros(0, dtype=REAL_DTYPE)
    perm = best_permutation(truth, estimate)
    errors = mod_pi(truth - estimate[perm])
    value = float(torch.sqrt(torch.mean(errors**2)))
    grad = torch.zeros(m, dtype=REAL_DTYPE)
    if value > 0:
        grad[perm] = -errors / (m * value)
    return value, grad


def rmspe(truth, estimate) -> float:
    """Root mean squared periodic error, minimized over source pairings. Radians."""
    value, _ = rmspe_with_grad(truth, estimate)
    return value


def _jain_with_grad(x: torch.Tensor) -> tuple[float, torch.Tensor]:
    n = x.numel()
    total, squares = x.sum(), (x**2).sum()
    if n == 0 or float(squares) == 0.0:
        raise NumericalError("Jain's index is undefined for an all-zero vector")
    value = total**2 / (n * squares)
    grad = (2 * total / (n * squares)) * (1 - total * x / squares)
    return float(value), grad


def jain_index(x: typing.Sequence[float] | torch.Tensor) -> float:
    """(sum x)^2 / (n sum x^2): 1 for a flat vector, 1/n for a one-hot vector."""
    value, _ = _jain_with_grad(torch.as_tensor(x, dtype=REAL_DTYPE).reshape(-1))
    return value


def _batch_mean(terms: list[tuple[float, torch.Tensor]], n_params: int) -> LossValue:
    assert terms, "a loss needs a non-empty batch"
    value = 0.0
    grad = torch.zeros(n_params, dtype=REAL_DTYPE)
    for term_value, term_grad in terms:
        value += term_value
        grad += term_grad
    return LossValue(value=value / len(terms), grad=grad / len(terms))


def loss_sl_theta(
    batch: list[Scene], params: ArrayParams, grid: AngularGrid, window_size: int, tau: float = 1.0
) -> LossValue:
    """Mean RMSPE of diffMUSIC estimates against the true DoAs."""
    n_params = 3 * params.n_antennas
    terms = []
    for scene in batch:
        if scene.n_sources == 0:
            terms.append((0.0, torch.zeros(n_params, dtype=REAL_DTYPE)))
            continue
        estimate, d_thetas = estimate_gradient(
            scene.snapshots, params, grid, scene.n_sources, window_size, tau
        )
        value, d_estimate = rmspe_with_grad(scene.thetas, estimate.thetas_hat)
        terms.append((value, d_estimate @ d_thetas))
    return _batch_mean(terms, n_params)


def loss_sl_p(batch: list[Scene], params: ArrayParams) -> LossValue:
    """Negative spectrum at the true DoAs, averaged over the batch. Never touches the grid."""
    n_params = 3 * params.n_antennas
    terms = []
    for scene in batch:
        if scene.n_sources == 0:
            terms.append((0.0, torch.zeros(n_params, dtype=REAL_DTYPE)))
            continue
        noise = noise_subspace_from_snapshots(scene.snapshots, scene.n_sources)
        values, grads = spectrum_gradient(noise, params, scene.thetas)
        terms.append((-float(values.sum()), -grads.sum(dim=0)))
    return _batch_mean(terms, n_params)


def loss_ul(
    batch: list[Scene],
    params: ArrayParams,
    grid: AngularGrid,
    m: int | None,
    window_size: int,
) -> LossValue:
    """Mean over scenes of the summed Jain's index of the spectrum inside each peak mask.

    DoA labels are not read. `m` is the number of sources to look for; None takes the count
    stored with each scene.
    """
    n_params = 3 * params.n_antennas
    terms = []
    for scene in batch:
        n_sources = scene.n_sources if m is None else m
        noise = noise_subspace_from_snapshots(scene.snapshots, n_sources)
        peaks = find_peaks(music_spectrum(noise, params, grid), n_sources)
        masks = [mask_at_index(grid, center, window_size) for center in peaks.indices.tolist()]
        value, grad = 0.0, torch.zeros(n_params, dtype=REAL_DTYPE)
        for values, d_values in mask_spectrum_gradients(noise, params, masks):
            index, d_index = _jain_with_grad(values)
            value += index
            grad += d_index @ d_values
        terms.append((value, grad))
    return _batch_mean(terms, n_params)
