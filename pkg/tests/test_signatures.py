import numpy as np
import pytest

from core.errors import SignatureError
from core.mesh_io import parse_mesh
from core.signatures import (
    compute_hks,
    compute_shapedna,
    compute_sihks,
    compute_wks,
    sihks_from_log_hks,
    wks_energy_grid,
)
from core.spectral import SpectralBasis, compute_basis
from core.synthetic import box, icosphere


@pytest.fixture(scope="module")
def sphere_basis(unit_sphere):
    return compute_basis(unit_sphere.scaled(300.0), 36)


@pytest.fixture(scope="module")
def fine_sphere_basis():
    # l <= 9 fills exactly 100 eigenpairs
    return compute_basis(icosphere(4), 100)


def _spread(values: np.ndarray) -> float:
    mean = values.mean(axis=0)
    return float(np.linalg.norm(values - mean, axis=1).max() / np.linalg.norm(mean))


def test_wks_shape_and_positivity(sphere_basis):
    wks = compute_wks(sphere_basis, num_energies=100, variance_factor=6.0)
    assert wks.values.shape == (642, 100)
    assert wks.kind == "WKS"
    assert np.all(wks.values >= 0)
    # convex combinations of squared eigenfunctions
    assert wks.values.max() <= (sphere_basis.eigenfunctions[:, 1:] ** 2).max() + 1e-15


def test_wks_weights_sum_to_one_per_energy():
    n, k = 5, 12
    basis = SpectralBasis(np.arange(k, dtype=float), np.ones((n, k)), np.ones(n))
    wks = compute_wks(basis, num_energies=20, variance_factor=3.0)
    np.testing.assert_allclose(wks.values, 1.0, rtol=1e-12)


def test_wks_energy_grid_spans_log_spectrum():
    eigenvalues = np.array([1.0, 2.0, 4.0, 8.0])
    energies, sigma = wks_energy_grid(eigenvalues, 10, 6.0)
    assert energies[0] - 2 * sigma == pytest.approx(0.0, abs=1e-12)
    assert energies[-1] + 2 * sigma == pytest.approx(np.log(8.0), rel=1e-12)
    assert sigma == pytest.approx(6.0 * (energies[1] - energies[0]), rel=1e-12)


def test_wks_needs_two_positive_eigenvalues(tetra_off):
    basis = compute_basis(parse_mesh(tetra_off, "off"), 2)
    with pytest.raises(SignatureError):
        compute_wks(basis)


def test_sphere_rows_are_nearly_identical(fine_sphere_basis):
    assert _spread(compute_wks(fine_sphere_basis).values) < 0.04
    assert _spread(compute_sihks(fine_sphere_basis).values) < 0.05


def test_wks_is_stable_across_articulated_poses(tube_poses):
    a, b = (compute_wks(basis).values for basis in tube_poses)
    discrepancy = np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)
    assert discrepancy.mean() < 0.05


def test_signatures_ignore_eigenfunction_signs(unit_sphere):
    basis = compute_basis(unit_sphere, 41)
    signs = np.where(np.random.default_rng(0).random(basis.k) < 0.5, -1.0, 1.0)
    flipped = SpectralBasis(basis.eigenvalues, basis.eigenfunctions * signs, basis.mass)
    for compute in (compute_wks, compute_sihks, lambda b: compute_hks(b, [0.01, 0.1])):
        np.testing.assert_allclose(compute(flipped).values, compute(basis).values, atol=1e-12)
    np.testing.assert_array_equal(
        compute_shapedna(flipped).values, compute_shapedna(basis).values
    )


def test_hks_tends_to_inverse_area(sphere_basis):
    hks = compute_hks(sphere_basis, [1e9])
    np.testing.assert_allclose(hks.values[:, 0], 1.0 / sphere_basis.area, rtol=1e-6)
    with pytest.raises(SignatureError):
        compute_hks(sphere_basis, [0.0])


def test_hks_strictly_decreases_in_time(unit_sphere):
    basis = compute_basis(unit_sphere, 16)
    hks = compute_hks(basis, np.logspace(-2, 0.5, 12)).values
    assert np.all(np.diff(hks, axis=1) < 0)


def test_hks_matches_sphere_heat_trace(fine_sphere_basis):
    degrees = np.arange(10)
    expected = np.sum((2 * degrees + 1) / (4 * np.pi) * np.exp(-degrees * (degrees + 1) * 0.1))
    hks = compute_hks(fine_sphere_basis, [0.1]).values[:, 0]
    np.testing.assert_allclose(hks, expected, rtol=0.05)


def test_sihks_is_scale_invariant(unit_sphere, sphere_basis):
    doubled = compute_basis(unit_sphere.scaled(600.0), 36)
    a = compute_sihks(sphere_basis).values
    b = compute_sihks(doubled).values
    assert a.shape == (642, 50)
    assert np.abs(a - b).max() / np.abs(a).max() < 1e-3


def test_sihks_is_scale_invariant_at_native_scale():
    mesh = box()
    reference = compute_sihks(compute_basis(mesh, 36)).values
    for scale in np.random.default_rng(7).uniform(0.5, 2.0, size=3):
        values = compute_sihks(compute_basis(mesh.scaled(scale), 36)).values
        assert np.abs(values - reference).max() / np.abs(reference).max() < 1e-3


def test_sihks_raw_times_are_not_scale_invariant():
    mesh = box()
    a = compute_sihks(compute_basis(mesh, 36), reference_area=None).values
    b = compute_sihks(compute_basis(mesh.scaled(2.0), 36), reference_area=None).values
    assert np.abs(a - b).max() / np.abs(a).max() > 1e-3
    with pytest.raises(SignatureError):
        compute_sihks(compute_basis(mesh, 36), reference_area=-1.0)


def test_sihks_of_constant_derivative_is_pure_dc():
    log_hks = np.tile(-0.3 * np.arange(64.0), (4, 1))
    values = sihks_from_log_hks(log_hks, 10)
    np.testing.assert_allclose(values[:, 0], 0.3 * 63, rtol=1e-12)
    assert np.abs(values[:, 1:]).max() < 1e-9


def test_sihks_grid_too_short():
    with pytest.raises(SignatureError):
        sihks_from_log_hks(np.zeros((3, 10)), 50)


def test_shapedna_area_normalization_is_scale_invariant(unit_sphere):
    small = compute_shapedna(compute_basis(unit_sphere, 41), 40)
    large = compute_shapedna(compute_basis(unit_sphere.scaled(2.0), 41), 40)
    np.testing.assert_allclose(large.values[1:], small.values[1:], rtol=1e-6)
    assert small.values.shape == (40,)


def test_shapedna_first_eigenvalue_normalization(unit_sphere):
    basis = compute_basis(unit_sphere, 10)
    dna = compute_shapedna(basis, 10, "firstEigenvalue")
    assert dna.values[1] == pytest.approx(1.0)
    with pytest.raises(SignatureError):
        compute_shapedna(basis, 20)
    with pytest.raises(SignatureError):
        compute_shapedna(basis, 5, "volume")
