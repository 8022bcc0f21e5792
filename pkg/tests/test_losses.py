# Licensed under the MIT License.
import math

import pytest
import torch

from arraycal.array_model import ArrayParams, nominal_ula
from arraycal.diffmusic import diffmusic_estimate
from arraycal.errors import DimensionError, NumericalError
from arraycal.losses import (
    best_permutation,
    jain_index,
    loss_sl_p,
    loss_sl_theta,
    loss_ul,
    mod_pi,
    rmspe,
    rmspe_with_grad,
)
from arraycal.music import AngularGrid, find_peaks, music_spectrum, spectrum_at
from arraycal.signal_sim import Scene, SimConfig, generate_dataset, physical_array
from arraycal.subspace import noise_subspace_from_snapshots
from arraycal.utils import COMPLEX_DTYPE, REAL_DTYPE, make_generator

from .conftest import FD_STEP, exact_snapshots, finite_difference, random_array

DEG = math.pi / 180


@pytest.fixture
def coarse_grid() -> AngularGrid:
    return AngularGrid.uniform(-90.0, 90.0, 0.1)


def _scalar(value: float) -> torch.Tensor:
    return torch.tensor(value, dtype=REAL_DTYPE)


@pytest.mark.parametrize(
    "delta_deg, expected_deg", [(0.0, 0.0), (179.0, -1.0), (-90.5, 89.5), (45.0, 45.0), (-300.0, 60.0)]
)
def test_mod_pi(delta_deg, expected_deg):
    assert float(mod_pi(delta_deg * DEG)) == pytest.approx(expected_deg * DEG, abs=1e-12)


def test_mod_pi_half_period_maps_to_upper_end():
    assert float(mod_pi(math.pi / 2)) == math.pi / 2
    assert float(mod_pi(-math.pi / 2)) == math.pi / 2


def test_rmspe_hand_computed():
    assert rmspe([10 * DEG, 20 * DEG], [21 * DEG, 9 * DEG]) == pytest.approx(1 * DEG)
    assert best_permutation([10 * DEG, 20 * DEG], [21 * DEG, 9 * DEG]).tolist() == [1, 0]


def test_rmspe_permutation_and_period_invariance():
    truth = torch.tensor([-0.7, -0.1, 0.3, 0.9], dtype=REAL_DTYPE)
    assert rmspe(truth, truth) == 0.0
    assert rmspe(truth, truth[[2, 0, 3, 1]]) == 0.0

    estimate = truth + torch.tensor([0.01, -0.02, 0.03, 0.0], dtype=REAL_DTYPE)
    base = rmspe(truth, estimate)
    shifted = estimate.clone()
    shifted[1] += math.pi
    assert rmspe(truth, shifted) == pytest.approx(base, abs=1e-12)
    order = [3, 1, 0, 2]
    assert rmspe(truth[order], estimate[order]) == pytest.approx(base, abs=1e-15)


def test_rmspe_length_mismatch():
    with pytest.raises(DimensionError):
        rmspe([0.1, 0.2], [0.1])


def test_best_permutation_tie_breaks_lexicographically():
    assert best_permutation([0.0, 0.0], [0.1, 0.1]).tolist() == [0, 1]


def test_large_source_counts_use_assignment():
    truth = torch.linspace(-1.2, 1.2, 10, dtype=REAL_DTYPE)
    order = torch.randperm(10, generator=make_generator(0))
    estimate = truth[order] + 0.001
    perm = best_permutation(truth, estimate)
    assert torch.equal(order[perm], torch.arange(10))
    assert rmspe(truth, estimate) == pytest.approx(0.001, abs=1e-12)


def test_rmspe_gradient_matches_finite_differences():
    truth = torch.tensor([-0.5, 0.2, 0.8], dtype=REAL_DTYPE)
    estimate = torch.tensor([0.83, -0.46, 0.17], dtype=REAL_DTYPE)
    _, grad = rmspe_with_grad(truth, estimate)
    h = 1e-7
    for i in range(3):
        plus, minus = estimate.clone(), estimate.clone()
        plus[i] += h
        minus[i] -= h
        fd = (rmspe(truth, plus) - rmspe(truth, minus)) / (2 * h)
        assert float(grad[i]) == pytest.approx(fd, rel=1e-6)


def test_jain_index_values():
    assert jain_index([2.0, 2.0, 2.0, 2.0]) == pytest.approx(1.0)
    assert jain_index([0.0, 0.0, 5.0]) == pytest.approx(1 / 3)
    assert jain_index([1.0, 2.0, 3.0]) == pytest.approx(6 / 7)
    with pytest.raises(NumericalError):
        jain_index([0.0, 0.0])


def test_jain_index_bounds():
    x = torch.rand(20, 7, dtype=REAL_DTYPE, generator=make_generator(3))
    for row in x:
        assert 1 / 7 - 1e-12 <= jain_index(row) <= 1 + 1e-12


@pytest.fixture
def exact_scenes() -> tuple[ArrayParams, list[Scene]]:
    params = random_array(21)
    grid = AngularGrid.uniform(-90.0, 90.0, 0.1)
    scenes = []
    for indices in ([500, 1100], [300, 1400]):
        thetas = grid.angles[indices]
        scenes.append(Scene(thetas=thetas, snapshots=exact_snapshots(params, thetas)))
    return params, scenes


def test_sl_theta_is_small_with_known_array(exact_scenes, coarse_grid):
    params, scenes = exact_scenes
    loss = loss_sl_theta(scenes, params, coarse_grid, 5)
    assert loss.value < coarse_grid.step
    assert torch.all(torch.isfinite(loss.grad))


def test_sl_p_at_truth_with_exact_covariance(exact_scenes):
    params, scenes = exact_scenes
    assert loss_sl_p(scenes, params).value < -2e6


def test_batch_mean_of_identical_scenes(noisy_scenes, impaired_array, coarse_grid):
    one = loss_sl_p(noisy_scenes[:1], impaired_array)
    two = loss_sl_p([noisy_scenes[0], noisy_scenes[0]], impaired_array)
    assert two.value == one.value
    torch.testing.assert_close(two.grad, one.grad)

    one = loss_sl_theta(noisy_scenes[:1], impaired_array, coarse_grid, 5)
    two = loss_sl_theta([noisy_scenes[0], noisy_scenes[0]], impaired_array, coarse_grid, 5)
    assert two.value == one.value


def test_empty_scene_contributes_zero(impaired_array):
    empty = Scene(thetas=[], snapshots=torch.ones(8, 10, dtype=COMPLEX_DTYPE))
    loss = loss_sl_p([empty], impaired_array)
    assert loss.value == 0.0
    assert loss.grad.shape == (24,)
    assert torch.all(loss.grad == 0)


@pytest.mark.parametrize("seed", range(10))
def test_sl_p_gradient_matches_finite_differences(seed, small_config):
    params = random_array(seed)
    scenes = generate_dataset(small_config, params, 3, make_generator(seed, 2))
    offset = torch.randn(24, dtype=REAL_DTYPE, generator=make_generator(seed, 9))
    perturbed = params.with_vector(params.to_vector() + 0.02 * offset)
    loss = loss_sl_p(scenes, perturbed)
    fd = finite_difference(lambda p: _scalar(loss_sl_p(scenes, p).value), perturbed)
    torch.testing.assert_close(loss.grad, fd, rtol=1e-5, atol=1e-5 * float(fd.abs().max()))


def _skip_if_peaks_move(scenes: list[Scene], params: ArrayParams, grid: AngularGrid, m: int) -> None:
    """Finite differences are only meaningful while the selected grid peaks stay put."""
    noises = [noise_subspace_from_snapshots(s.snapshots, m) for s in scenes]
    reference = [find_peaks(music_spectrum(noise, params, grid), m).indices for noise in noises]
    vector = params.to_vector()
    for k in range(vector.numel()):
        for sign in (1.0, -1.0):
            shifted = vector.clone()
            shifted[k] += sign * FD_STEP
            moved = params.with_vector(shifted)
            for noise, ref in zip(noises, reference):
                if not torch.equal(find_peaks(music_spectrum(noise, moved, grid), m).indices, ref):
                    pytest.skip("peak selection changes under perturbation")


@pytest.mark.parametrize("seed", range(4))
def test_sl_theta_gradient_matches_finite_differences(seed, small_config):
    grid = AngularGrid.uniform(-90.0, 90.0, 0.5)
    scenes = generate_dataset(small_config, random_array(seed), 2, make_generator(seed, 3))
    nominal = nominal_ula(8)
    _skip_if_peaks_move(scenes, nominal, grid, 2)
    tau = 0.2 * max(
        float(spectrum_at(noise_subspace_from_snapshots(s.snapshots, 2), nominal, grid.angles).max())
        for s in scenes
    )
    loss = loss_sl_theta(scenes, nominal, grid, 7, tau)
    fd = finite_difference(lambda p: _scalar(loss_sl_theta(scenes, p, grid, 7, tau).value), nominal)
    torch.testing.assert_close(loss.grad, fd, rtol=1e-3, atol=1e-3 * float(fd.abs().max()))


@pytest.mark.parametrize("seed", range(4))
def test_ul_gradient_matches_finite_differences(seed, small_config):
    grid = AngularGrid.uniform(-90.0, 90.0, 0.5)
    scenes = generate_dataset(small_config, random_array(seed), 2, make_generator(seed, 4))
    nominal = nominal_ula(8)
    _skip_if_peaks_move(scenes, nominal, grid, 2)
    loss = loss_ul(scenes, nominal, grid, 2, 9)
    fd = finite_difference(lambda p: _scalar(loss_ul(scenes, p, grid, 2, 9).value), nominal)
    torch.testing.assert_close(loss.grad, fd, rtol=1e-4, atol=1e-4 * float(fd.abs().max()))


def test_ul_value_range(noisy_scenes, impaired_array, coarse_grid):
    # each mask contributes a Jain's index in [1/L, 1]
    loss = loss_ul(noisy_scenes, impaired_array, coarse_grid, 2, 11)
    assert 2 / 11 - 1e-12 <= loss.value <= 2 + 1e-12


def test_ul_ignores_labels(noisy_scenes, impaired_array, coarse_grid):
    relabelled = [Scene(thetas=s.thetas + 0.01, snapshots=s.snapshots) for s in noisy_scenes]
    a = loss_ul(noisy_scenes, impaired_array, coarse_grid, 2, 11)
    b = loss_ul(relabelled, impaired_array, coarse_grid, 2, 11)
    assert a.value == b.value
    assert torch.equal(a.grad, b.grad)


def test_ul_defaults_to_scene_source_count(noisy_scenes, impaired_array, coarse_grid):
    a = loss_ul(noisy_scenes, impaired_array, coarse_grid, None, 11)
    b = loss_ul(noisy_scenes, impaired_array, coarse_grid, 2, 11)
    assert a.value == b.value


def test_sl_theta_single_scene_matches_rmspe(noisy_scenes, impaired_array, coarse_grid):
    scene = noisy_scenes[0]
    noise = noise_subspace_from_snapshots(scene.snapshots, 2)
    estimate = diffmusic_estimate(music_spectrum(noise, impaired_array, coarse_grid), 2, 5)
    loss = loss_sl_theta([scene], impaired_array, coarse_grid, 5)
    assert loss.value == pytest.approx(rmspe(scene.thetas, estimate.thetas_hat), rel=1e-12)


@pytest.mark.slow
def test_sl_p_prefers_the_physical_array():
    config = SimConfig(n_antennas=16, n_sources=5, n_snapshots=100, snr_db=30.0)
    wins = 0
    for seed in range(10):
        nominal, physical = physical_array(config, make_generator(seed))
        scenes = generate_dataset(config, physical, 8, make_generator(seed, 1))
        wins += loss_sl_p(scenes, physical).value < loss_sl_p(scenes, nominal).value
    assert wins >= 9


@pytest.mark.slow
def test_ul_prefers_the_physical_array():
    config = SimConfig(n_antennas=16, n_sources=5, n_snapshots=100, snr_db=30.0)
    grid = AngularGrid.uniform(-90.0, 90.0, 0.05)
    nominal, physical = physical_array(config, make_generator(0))
    scenes = generate_dataset(config, physical, 20, make_generator(1))
    assert loss_ul(scenes, physical, grid, 5, 21).value < loss_ul(scenes, nominal, grid, 5, 21).value


@pytest.mark.slow
def test_sl_p_decreases_from_nominal_to_physical():
    config = SimConfig(n_antennas=16, n_sources=5, n_snapshots=100, snr_db=30.0)
    monotone = 0
    n_seeds = 10
    for seed in range(n_seeds):
        nominal, physical = physical_array(config, make_generator(seed))
        scenes = generate_dataset(config, physical, 8, make_generator(seed, 1))
        start, end = nominal.to_vector(), physical.to_vector()
        values = [
            loss_sl_p(scenes, nominal.with_vector(start + t * (end - start))).value
            for t in torch.linspace(0.0, 1.0, 21, dtype=REAL_DTYPE)
        ]
        monotone += all(b <= a for a, b in zip(values, values[1:]))
    assert monotone >= 0.9 * n_seeds
