# Licensed under the MIT License.
"""
Array parametrization and steering vectors.

The array manifold is parametrized by zeta = (complex gains g, axial positions p). A source at
angle theta produces the steering vector

    a_i(theta) = g_i * exp(-j * 2pi/lambda * p_i * u(theta)) / ||g||_2

where u is the direction function (`sin` for angles measured from broadside, `cos` for angles
measured from the array axis). Gradients are taken with respect to the 3N real degrees of
freedom [Re g, Im g, p]; complex gains are never differentiated in the Wirtinger sense.
"""

import logging
import math
import typing
from dataclasses import dataclass, field
from typing import Literal

import torch

from .errors import ConfigError, NormalizationError
from .utils import COMPLEX_DTYPE, REAL_DTYPE

logger = logging.getLogger(__name__)

DirectionLiteral = Literal["sin", "cos"]
SUPPORTED_DIRECTIONS = list(typing.get_args(DirectionLiteral))

# Angles slightly outside [-pi/2, pi/2] appear through float rounding of grid endpoints.
_ANGLE_TOL = 1e-9


def direction_cosine(thetas: torch.Tensor, direction: DirectionLiteral) -> torch.Tensor:
    """Evaluate the direction function u(theta)."""
    if direction == "sin":
        return torch.sin(thetas)
    if direction == "cos":
        return torch.cos(thetas)
    raise ConfigError(f"direction must be one of {SUPPORTED_DIRECTIONS}, got {direction!r}")


def _as_angles(thetas: float | typing.Sequence[float] | torch.Tensor) -> torch.Tensor:
    thetas = torch.as_tensor(thetas, dtype=REAL_DTYPE)
    assert torch.all(thetas.abs() <= math.pi / 2 + _ANGLE_TOL), "angles must lie in [-pi/2, pi/2]"
    return thetas


@dataclass(frozen=True, eq=False)
class ArrayParams:
    """Physical parametrization zeta of a linear array.

    Attributes:
        gains: complex antenna gains, shape [N], dimensionless.
        positions: antenna positions along the array axis, shape [N], meters.
        wavelength: carrier wavelength, meters.
        direction: direction function used to map angles onto the array axis.
    """

    gains: torch.Tensor
    positions: torch.Tensor
    wavelength: float
    direction: DirectionLiteral = "sin"
    _n: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        gains = torch.as_tensor(self.gains).to(COMPLEX_DTYPE).reshape(-1)
        positions = torch.as_tensor(self.positions).to(REAL_DTYPE).reshape(-1)
        if gains.shape != positions.shape:
            raise ConfigError(
                f"gains and positions must have the same length, got {gains.shape[0]} and {positions.shape[0]}"
            )
        if gains.shape[0] < 2:
            raise ConfigError(f"an array needs at least 2 antennas, got {gains.shape[0]}")
        if not self.wavelength > 0:
            raise ConfigError(f"wavelength must be positive, got {self.wavelength}")
        if self.direction not in SUPPORTED_DIRECTIONS:
            raise ConfigError(
                f"direction must be one of {SUPPORTED_DIRECTIONS}, got {self.direction!r}"
            )
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "wavelength", float(self.wavelength))
        object.__setattr__(self, "_n", int(gains.shape[0]))

    @property
    def n_antennas(self) -> int:
        return self._n

    @property
    def wavenumber(self) -> float:
        return 2 * math.pi / self.wavelength

    def gain_norm(self) -> torch.Tensor:
        """||g||_2 as a 0-d tensor. Raises NormalizationError when every gain is zero."""
        norm = torch.linalg.vector_norm(self.gains)
        if float(norm) == 0.0:
            raise NormalizationError("steering vectors are undefined for all-zero antenna gains")
        return norm

    def to_vector(self) -> torch.Tensor:
        """Flatten zeta into the real vector [Re g, Im g, p] of length 3N."""
        return torch.cat([self.gains.real, self.gains.imag, self.positions])

    def with_vector(self, vector: torch.Tensor) -> "ArrayParams":
        """Inverse of `to_vector`, keeping wavelength and direction."""
        vector = torch.as_tensor(vector, dtype=REAL_DTYPE).detach()
        n = self.n_antennas
        assert vector.shape == (3 * n,), f"expected a vector of length {3 * n}, got {vector.shape}"
        return ArrayParams(
            gains=torch.complex(vector[:n], vector[n : 2 * n]),
            positions=vector[2 * n :],
            wavelength=self.wavelength,
            direction=self.direction,
        )

    def replace(self, **kwargs: typing.Any) -> "ArrayParams":
        """Returns a copy with updated fields."""
        fields = dict(
            gains=self.gains,
            positions=self.positions,
            wavelength=self.wavelength,
            direction=self.direction,
        )
        fields.update(kwargs)
        return ArrayParams(**fields)


def nominal_ula(
    n_antennas: int, wavelength: float = 1.0, direction: DirectionLiteral = "sin"
) -> ArrayParams:
    """Half-wavelength uniform linear array with unit gains, antenna 0 at the origin."""
    return ArrayParams(
        gains=torch.ones(n_antennas, dtype=COMPLEX_DTYPE),
        positions=torch.arange(n_antennas, dtype=REAL_DTYPE) * (wavelength / 2),
        wavelength=wavelength,
        direction=direction,
    )


def _phase_terms(params: ArrayParams, thetas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns u(theta) with the shape of `thetas` and exp(-j k p u) with shape [..., N]."""
    u = direction_cosine(thetas, params.direction)
    phase = -params.wavenumber * u[..., None] * params.positions
    return u, torch.polar(torch.ones_like(phase), phase)


def steering_vector(params: ArrayParams, theta: float | torch.Tensor) -> torch.Tensor:
    """Steering vector a_zeta(theta), shape [N]. It has unit norm for every valid input."""
    theta = _as_angles(theta)
    assert theta.ndim == 0, "steering_vector takes a single angle, use steering_matrix for several"
    norm = params.gain_norm()
    _, exps = _phase_terms(params, theta)
    return params.gains * exps / norm


def steering_matrix(
    params: ArrayParams, thetas: typing.Sequence[float] | torch.Tensor
) -> torch.Tensor:
    """Steering matrix A_zeta(thetas), shape [N, M]; column i is the steering vector of thetas[i]."""
    thetas = _as_angles(thetas).reshape(-1)
    assert thetas.numel() > 0, "thetas must be non-empty"
    norm = params.gain_norm()
    _, exps = _phase_terms(params, thetas)  # [M, N]
    return (params.gains * exps / norm).T


@dataclass(frozen=True, eq=False)
class SteeringJacobian:
    """Partial derivatives of a steering vector.

    Every field has shape [..., N, N] with entry [..., i, k] = d a_i / d zeta_k, the leading
    dimensions following the angles the Jacobian was evaluated at.
    """

    d_dre_gain: torch.Tensor
    d_dim_gain: torch.Tensor
    d_dposition: torch.Tensor

    def stacked(self) -> torch.Tensor:
        """Concatenate into [..., N, 3N], columns ordered as `ArrayParams.to_vector`."""
        return torch.cat([self.d_dre_gain, self.d_dim_gain, self.d_dposition], dim=-1)


def steering_jacobian(
    params: ArrayParams, thetas: float | typing.Sequence[float] | torch.Tensor
) -> SteeringJacobian:
    """Closed-form Jacobian of the steering vector with respect to [Re g, Im g, p].

    A scalar angle gives [N, N] partials, a 1-D tensor of K angles gives [K, N, N].
    The gain partials include the coupling through the 1/||g|| normalization; the position
    partials are diagonal.
    """
    thetas = _as_angles(thetas)
    norm = params.gain_norm()
    u, exps = _phase_terms(params, thetas)
    a = params.gains * exps / norm  # [..., N]

    coupling = a[..., :, None] / norm**2  # [..., N, 1]
    d_dre = torch.diag_embed(exps / norm) - coupling * params.gains.real
    d_dim = torch.diag_embed(1j * exps / norm) - coupling * params.gains.imag
    d_dp = torch.diag_embed((-1j * params.wavenumber) * u[..., None] * a)
    return SteeringJacobian(d_dre_gain=d_dre, d_dim_gain=d_dim, d_dposition=d_dp)


def gauge_fix(params: ArrayParams, reference: ArrayParams | None = None) -> ArrayParams:
    """Remove the gauge freedoms the MUSIC spectrum cannot see.

    The spectrum is unchanged by a global complex gain factor and by a common shift of all
    positions. The gains are rotated so that antenna 0 is real positive. Without a reference the
    gains are scaled to ||g|| = sqrt(N) and antenna 0 is moved to the origin; with a reference
    the gain norm is matched to it and the mean position offset to it is removed.
    """
    gains = params.gains
    g0 = gains[0]
    if g0.abs() > 0:
        gains = gains * (g0.conj() / g0.abs())
    target_norm = (
        math.sqrt(params.n_antennas) if reference is None else reference.gain_norm()
    )
    gains = gains * (target_norm / params.gain_norm())
    if reference is None:
        positions = params.positions - params.positions[0]
    else:
        assert reference.n_antennas == params.n_antennas
        positions = params.positions - (params.positions - reference.positions).mean()
    return params.replace(gains=gains, positions=positions)


@dataclass(frozen=True, eq=False)
class ImpairmentErrors:
    """Per-antenna errors after gauge fixing; positions in meters, gains absolute."""

    position_errors: torch.Tensor
    gain_errors: torch.Tensor

    def count_within(self, position_tol: float, gain_tol: float) -> int:
        ok = (self.position_errors <= position_tol) & (self.gain_errors <= gain_tol)
        return int(ok.sum())


def impairment_errors(learned: ArrayParams, truth: ArrayParams) -> ImpairmentErrors:
    """Compare a learned array against the physical one, both gauge fixed."""
    truth_fixed = gauge_fix(truth)
    learned_fixed = gauge_fix(learned, reference=truth_fixed)
    return ImpairmentErrors(
        position_errors=(learned_fixed.positions - truth_fixed.positions).abs(),
        gain_errors=(learned_fixed.gains - truth_fixed.gains).abs(),
    )
