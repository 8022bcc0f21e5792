# Licensed under the MIT License.
"""
Simulation of impaired arrays and narrowband far-field measurements.

    X = A_zeta(theta) S + N,   s_t ~ CN(0, sigma_s^2 I_M),   n_t ~ CN(0, sigma_n^2 I_N)

with SNR = 10 log10(sigma_s^2 / sigma_n^2). All randomness comes from the `torch.Generator`
passed in; nothing here touches the global RNG.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import torch

from .array_model import ArrayParams, DirectionLiteral, nominal_ula, steering_matrix
from .errors import ConfigError, DegenerateDoAError, DimensionError
from .utils import COMPLEX_DTYPE, REAL_DTYPE, make_generator

logger = logging.getLogger(__name__)


@dataclass
class SimConfig:
    """Scene generation settings. Angles are given in degrees, lengths in meters."""

    n_antennas: int = 16
    n_sources: int = 5
    n_snapshots: int = 100
    snr_db: float = 30.0
    source_power: float = 1.0
    doa_low_deg: float = -80.0
    doa_high_deg: float = 80.0
    min_separation_deg: float = 2.0
    wavelength: float = 1.0
    direction: DirectionLiteral = "sin"
    # 0.5 * lambda / 2 for the default wavelength
    position_spread: float = 0.25
    gain_variance: float = 0.36
    seed: int = 0
    max_rejection_tries: int = 1000

    def __post_init__(self) -> None:
        if self.n_antennas < 2:
            raise ConfigError(f"n_antennas must be at least 2, got {self.n_antennas}")
        if not 0 <= self.n_sources < self.n_antennas:
            raise DimensionError(
                f"need 0 <= n_sources < n_antennas, got M={self.n_sources}, N={self.n_antennas}"
            )
        if self.n_snapshots < 1:
            raise ConfigError(f"n_snapshots must be at least 1, got {self.n_snapshots}")
        if not self.source_power > 0:
            raise ConfigError(f"source_power must be positive, got {self.source_power}")
        if self.position_spread < 0 or self.gain_variance < 0:
            raise ConfigError("position_spread and gain_variance must be non-negative")
        if not -90.0 <= self.doa_low_deg < self.doa_high_deg <= 90.0:
            raise ConfigError(
                f"need -90 <= doa_low < doa_high <= 90, got [{self.doa_low_deg}, {self.doa_high_deg}]"
            )
        if self.min_separation_deg < 0:
            raise ConfigError("min_separation_deg must be non-negative")

    @property
    def noise_power(self) -> float:
        return noise_power(self.source_power, self.snr_db)

    def to_dict(self) -> dict:
        return asdict(self)


def noise_power(source_power: float, snr_db: float) -> float:
    """sigma_n^2 = sigma_s^2 * 10^(-SNR/10); an infinite SNR gives a noiseless model."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return source_power * 10 ** (-snr_db / 10)


@dataclass(eq=False)
class Scene:
    """Ground-truth DoAs (radians, ascending) and the N x T snapshots they generated."""

    thetas: torch.Tensor
    snapshots: torch.Tensor
    n_sources: int = field(init=False)

    def __post_init__(self) -> None:
        self.thetas = torch.as_tensor(self.thetas, dtype=REAL_DTYPE).reshape(-1)
        self.snapshots = torch.as_tensor(self.snapshots).to(COMPLEX_DTYPE)
        assert self.snapshots.ndim == 2, "snapshots must be an N x T matrix"
        n, t = self.snapshots.shape
        assert t >= 1, "need at least one snapshot"
        assert self.thetas.numel() < n, "a scene needs fewer sources than antennas"
        assert torch.all(self.thetas[1:] > self.thetas[:-1]), "thetas must be strictly ascending"
        self.n_sources = int(self.thetas.numel())


def _complex_normal(shape: tuple[int, ...], variance: float, rng: torch.Generator) -> torch.Tensor:
    # torch's complex randn draws Re and Im independently from N(0, 1/2).
    z = torch.randn(shape, dtype=COMPLEX_DTYPE, generator=rng)
    return math.sqrt(variance) * z


def sample_impaired_array(
    nominal: ArrayParams, eta: float, gain_var: float, rng: torch.Generator
) -> ArrayParams:
    """Perturb a nominal array: p_i + U[-eta, eta] and g_i + CN(0, gain_var)."""
    assert eta >= 0 and gain_var >= 0, "eta and gain_var must be non-negative"
    n = nominal.n_antennas
    delta_p = (2 * torch.rand(n, dtype=REAL_DTYPE, generator=rng) - 1) * eta
    delta_g = _complex_normal((n,), gain_var, rng)
    return nominal.replace(gains=nominal.gains + delta_g, positions=nominal.positions + delta_p)


def sample_doas(config: SimConfig, rng: torch.Generator) -> torch.Tensor:
    """Draw ascending i.i.d. uniform DoAs whose pairwise gaps exceed the minimum separation."""
    low, high = math.radians(config.doa_low_deg), math.radians(config.doa_high_deg)
    min_sep = math.radians(config.min_separation_deg)
    for attempt in range(config.max_rejection_tries):
        thetas = low + (high - low) * torch.rand(config.n_sources, dtype=REAL_DTYPE, generator=rng)
        thetas, _ = torch.sort(thetas)
        if config.n_sources < 2:
            return thetas
        gaps = thetas[1:] - thetas[:-1]
        if torch.all(gaps > min_sep):
            if attempt > 0:
                logger.debug(f"DoA rejection sampling accepted after {attempt + 1} draws")
            return thetas
    raise DegenerateDoAError(
        f"could not draw {config.n_sources} DoAs separated by {config.min_separation_deg} deg "
        f"in [{config.doa_low_deg}, {config.doa_high_deg}] after {config.max_rejection_tries} tries"
    )


def generate_scene(config: SimConfig, physical: ArrayParams, rng: torch.Generator) -> Scene:
    """Simulate one scene: fresh DoAs, source signals and noise."""
    assert physical.n_antennas == config.n_antennas, "array size does not match the config"
    thetas = sample_doas(config, rng)
    m, t = config.n_sources, config.n_snapshots
    signals = _complex_normal((m, t), config.source_power, rng)
    noise = _complex_normal((config.n_antennas, t), config.noise_power, rng)
    if m == 0:
        return Scene(thetas=thetas, snapshots=noise)
    x = steering_matrix(physical, thetas) @ signals + noise
    return Scene(thetas=thetas, snapshots=x)


def generate_dataset(
    config: SimConfig,
    physical: ArrayParams,
    n_scenes: int,
    rng: torch.Generator,
    num_workers: int = 1,
) -> list[Scene]:
    """Simulate `n_scenes` independent scenes sharing one physical array.

    One parent seed is drawn from `rng`; scene i uses the child seed
    `SeedSequence(entropy=parent, spawn_key=(i,))`, so the result does not depend on
    `num_workers`.
    """
    assert n_scenes >= 1, "n_scenes must be at least 1"
    parent_seed = int(torch.randint(0, 2**62, (1,), generator=rng))

    def _one(index: int) -> Scene:
        return generate_scene(config, physical, make_generator(parent_seed, index))

    if num_workers <= 1:
        return [_one(i) for i in range(n_scenes)]
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        return list(pool.map(_one, range(n_scenes)))


def physical_array(config: SimConfig, rng: torch.Generator) -> tuple[ArrayParams, ArrayParams]:
    """Nominal ULA for the config and one impaired draw of it. Returns (nominal, physical)."""
    nominal = nominal_ula(config.n_antennas, config.wavelength, config.direction)
    physical = sample_impaired_array(nominal, config.position_spread, config.gain_variance, rng)
    return nominal, physical


def model_covariance(
    params: ArrayParams,
    thetas: torch.Tensor,
    source_power: float = 1.0,
    noise_power: float = 0.0,
) -> torch.Tensor:
    """Exact covariance A Gamma_S A^H + sigma_n^2 I for uncorrelated equal-power sources."""
    eye = torch.eye(params.n_antennas, dtype=COMPLEX_DTYPE)
    thetas = torch.as_tensor(thetas, dtype=REAL_DTYPE).reshape(-1)
    if thetas.numel() == 0:
        return noise_power * eye
    a = steering_matrix(params, thetas)
    return source_power * (a @ a.conj().T) + noise_power * eye


def split_dataset(
    scenes: list[Scene], validation_fraction: float, seed: int
) -> tuple[list[Scene], list[Scene]]:
    """Deterministically hold out a fraction of scenes. Returns (train, validation).

    The validation part is empty when the fraction is 0 or when only one scene is available.
    """
    assert 0 <= validation_fraction < 1, "validation_fraction must be in [0, 1)"
    n_val = math.ceil(validation_fraction * len(scenes)) if len(scenes) > 1 else 0
    order = torch.randperm(len(scenes), generator=make_generator(seed, 0)).tolist()
    val_idx = sorted(order[:n_val])
    train_idx = sorted(order[n_val:])
    return [scenes[i] for i in train_idx], [scenes[i] for i in val_idx]


@dataclass(eq=False)
class DatasetBundle:
    """What a dataset file holds: the config echo, the physical array and the scenes."""

    config: SimConfig
    physical: ArrayParams
    scenes: list[Scene]
