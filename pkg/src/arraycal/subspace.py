# Licensed under the MIT License.
import logging
from dataclasses import dataclass

import torch

from .errors import DimensionError, NumericalError
from .utils import COMPLEX_DTYPE, REAL_DTYPE

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-10
# Relative residual ||G U - U L||_F / ||G||_F above which an EVD is rejected.
EVD_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    """Eigenvalues sorted descending; column i of `eigenvectors` pairs with eigenvalue i."""

    eigenvalues: torch.Tensor  # [N] real
    eigenvectors: torch.Tensor  # [N, N] unitary


@dataclass(frozen=True, eq=False)
class NoiseSubspace:
    """Orthonormal basis U_N of the noise subspace, shape [N, N - M]."""

    basis: torch.Tensor

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def project(self, vectors: torch.Tensor) -> torch.Tensor:
        """U_N U_N^H applied to the columns of `vectors` ([N] or [N, K])."""
        return self.basis @ (self.basis.conj().T @ vectors)


def _symmetrize(gamma: torch.Tensor) -> torch.Tensor:
    return (gamma + gamma.conj().T) / 2


def sample_covariance(x: torch.Tensor) -> torch.Tensor:
    """Sample covariance X X^H / T, made exactly Hermitian."""
    x = torch.as_tensor(x).to(COMPLEX_DTYPE)
    assert x.ndim == 2 and x.shape[1] >= 1, "expected an N x T snapshot matrix with T >= 1"
    return _symmetrize(x @ x.conj().T / x.shape[1])


def _fix_phase(vectors: torch.Tensor) -> torch.Tensor:
    """Rotate each column so its largest-magnitude entry is real positive."""
    idx = torch.argmax(vectors.abs(), dim=0)
    pivots = vectors[idx, torch.arange(vectors.shape[1])]
    return vectors * (pivots.conj() / pivots.abs())


def hermitian_evd(gamma: torch.Tensor) -> EigenDecomposition:
    """Eigendecomposition of a Hermitian matrix, eigenvalues descending.

    Output is deterministic for identical input: each eigenvector is rotated so that its
    largest-magnitude entry is real and positive.
    """
    gamma = torch.as_tensor(gamma).to(COMPLEX_DTYPE)
    assert gamma.ndim == 2 and gamma.shape[0] == gamma.shape[1], "expected a square matrix"
    if not torch.all(torch.isfinite(torch.view_as_real(gamma))):
        raise NumericalError("covariance matrix has non-finite entries")
    scale = max(1.0, float(torch.linalg.matrix_norm(gamma)))
    asym = float(torch.linalg.matrix_norm(gamma - gamma.conj().T))
    assert asym <= HERMITIAN_TOL * scale, f"matrix is not Hermitian (asymmetry {asym:.3e})"
    gamma = _symmetrize(gamma)

    try:
        eigenvalues, eigenvectors = torch.linalg.eigh(gamma)
    except torch.linalg.LinAlgError as e:
        raise NumericalError(f"Hermitian EVD did not converge: {e}", residual=float("nan")) from e

    eigenvalues = torch.flip(eigenvalues, dims=[0]).to(REAL_DTYPE)
    eigenvectors = _fix_phase(torch.flip(eigenvectors, dims=[1]))

    residual = float(
        torch.linalg.matrix_norm(gamma @ eigenvectors - eigenvectors * eigenvalues)
    ) / max(float(torch.linalg.matrix_norm(gamma)), torch.finfo(REAL_DTYPE).tiny)
    if residual > EVD_RESIDUAL_TOL:
        raise NumericalError(
            f"Hermitian EVD residual {residual:.3e} exceeds {EVD_RESIDUAL_TOL}", residual=residual
        )
    return EigenDecomposition(eigenvalues=eigenvalues, eigenvectors=eigenvectors)


def noise_subspace(evd: EigenDecomposition, m_sources: int) -> NoiseSubspace:
    """The N - M eigenvectors with the smallest eigenvalues."""
    n = evd.eigenvectors.shape[0]
    if not 1 <= m_sources < n:
        raise DimensionError(f"need 1 <= M < N for subspace separation, got M={m_sources}, N={n}")
    return NoiseSubspace(basis=evd.eigenvectors[:, m_sources:])


def noise_subspace_from_snapshots(x: torch.Tensor, m_sources: int) -> NoiseSubspace:
    """sample_covariance -> hermitian_evd -> noise_subspace."""
    return noise_subspace(hermitian_evd(sample_covariance(x)), m_sources)
