# Licensed under the MIT License.
from collections.abc import Callable

import pytest
import torch

from arraycal.array_model import ArrayParams, nominal_ula
from arraycal.signal_sim import Scene, SimConfig, generate_scene, model_covariance, sample_impaired_array
from arraycal.subspace import hermitian_evd
from arraycal.utils import COMPLEX_DTYPE, REAL_DTYPE, make_generator

FD_STEP = 1e-6


@pytest.fixture
def small_config() -> SimConfig:
    return SimConfig(n_antennas=8, n_sources=2, n_snapshots=50, snr_db=10.0, seed=3)


@pytest.fixture
def impaired_array() -> ArrayParams:
    nominal = nominal_ula(8)
    return sample_impaired_array(nominal, eta=0.25, gain_var=0.36, rng=make_generator(1234))


@pytest.fixture
def noisy_scenes(small_config: SimConfig, impaired_array: ArrayParams) -> list[Scene]:
    rng = make_generator(small_config.seed)
    return [generate_scene(small_config, impaired_array, rng) for _ in range(4)]


def exact_snapshots(
    params: ArrayParams, thetas: torch.Tensor, noise_power: float = 0.0
) -> torch.Tensor:
    """Snapshot matrix whose sample covariance equals the model covariance (T = N)."""
    gamma = model_covariance(params, thetas, source_power=1.0, noise_power=noise_power)
    evd = hermitian_evd(gamma)
    n = params.n_antennas
    scale = torch.sqrt(torch.clamp(evd.eigenvalues, min=0.0) * n).to(COMPLEX_DTYPE)
    return evd.eigenvectors * scale


def finite_difference(
    fn: Callable[[ArrayParams], torch.Tensor], params: ArrayParams, step: float = FD_STEP
) -> torch.Tensor:
    """Central differences of fn over [Re g, Im g, p]. Returns [..., 3N] for an output of shape [...]."""
    vector = params.to_vector()
    columns = []
    for k in range(vector.numel()):
        plus, minus = vector.clone(), vector.clone()
        plus[k] += step
        minus[k] -= step
        diff = fn(params.with_vector(plus)) - fn(params.with_vector(minus))
        columns.append(torch.as_tensor(diff) / (2 * step))
    return torch.stack(columns, dim=-1)


def random_array(seed: int, n: int = 8, direction: str = "sin") -> ArrayParams:
    rng = make_generator(seed)
    gains = torch.randn(n, dtype=COMPLEX_DTYPE, generator=rng) + 1.0
    positions = torch.arange(n, dtype=REAL_DTYPE) * 0.5 + 0.1 * torch.randn(
        n, dtype=REAL_DTYPE, generator=rng
    )
    return ArrayParams(gains=gains, positions=positions, wavelength=1.0, direction=direction)
