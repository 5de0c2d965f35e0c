import math

import numpy as np
import pytest

from fmapnet.errors import CacheMismatchError, DimensionError, ParameterError
from fmapnet.mesh_core import TriangleMesh, total_area
from fmapnet.spectral_basis import (cotan_laplacian, compute_basis, compute_full_basis, eigen_residuals, project,
                                    reconstruct, sampled_projector, truncate, save_basis, load_basis)
from fmapnet.synthetic import equilateral_triangle, random_rotation, rigid_transform, bumpy_sphere


def _mass_gram(basis):
    return basis.eigenvectors.T @ (basis.eigenvectors * basis.mass[:, None])


def test_cotan_weights_equilateral_triangle():
    W = cotan_laplacian(equilateral_triangle()).toarray()
    off = W[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -1.0 / (2 * math.sqrt(3)), rtol=1e-12)
    np.testing.assert_allclose(W.sum(axis=1), 0.0, atol=1e-14)


def test_cotan_right_angle_gives_zero_weight():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    W = cotan_laplacian(mesh).toarray()
    assert W[1, 2] == pytest.approx(0.0, abs=1e-15)
    assert W[0, 1] == pytest.approx(-0.5 * 1.0, rel=1e-12)


def test_cotan_laplacian_symmetric_with_constant_kernel(medium_sheet):
    W = cotan_laplacian(medium_sheet)
    assert abs(W - W.T).max() < 1e-14
    np.testing.assert_allclose(W @ np.ones(medium_sheet.n_vertices), 0.0, atol=1e-12)


def test_basis_is_mass_orthonormal_and_sorted(medium_sheet_basis):
    basis = medium_sheet_basis
    np.testing.assert_allclose(_mass_gram(basis), np.eye(basis.k), atol=1e-8)
    assert np.all(np.diff(basis.eigenvalues) >= 0)
    assert basis.eigenvalues[0] <= 1e-6 * basis.eigenvalues[-1]


def test_first_eigenfunction_is_constant(medium_sheet, medium_sheet_basis):
    phi0 = medium_sheet_basis.eigenvectors[:, 0]
    np.testing.assert_allclose(phi0, 1.0 / math.sqrt(total_area(medium_sheet)), rtol=1e-6)


def test_sign_convention_largest_entry_positive(medium_sheet_basis):
    phi = medium_sheet_basis.eigenvectors
    pivots = np.argmax(np.abs(phi), axis=0)
    assert np.all(phi[pivots, np.arange(phi.shape[1])] > 0)


def test_eigen_residuals_small(medium_sheet, medium_sheet_basis):
    assert np.max(eigen_residuals(medium_sheet, medium_sheet_basis)) < 1e-6


def test_sparse_solver_path_matches_dense():
    mesh = bumpy_sphere(subdivisions=3, amplitude=0.1, seed=2)
    assert mesh.n_vertices > 400
    basis = compute_basis(mesh, k=12)
    full = compute_full_basis(mesh)
    np.testing.assert_allclose(basis.eigenvalues[1:], full.eigenvalues[1:12], rtol=1e-8)
    assert np.max(eigen_residuals(mesh, basis)) < 1e-6


def test_unit_sphere_spectrum(unit_icosphere):
    basis = compute_basis(unit_icosphere, k=9)
    np.testing.assert_allclose(basis.eigenvalues[1:4], 2.0, rtol=0.02)
    np.testing.assert_allclose(basis.eigenvalues[4:9], 6.0, rtol=0.03)
    np.testing.assert_allclose(_mass_gram(basis), np.eye(9), atol=1e-8)


def test_spectrum_rigid_and_scale_behaviour():
    mesh = bumpy_sphere(subdivisions=2, amplitude=0.1, seed=4)
    base = compute_basis(mesh, k=10).eigenvalues
    moved = rigid_transform(mesh, random_rotation(7), [0.3, -1.0, 2.0])
    np.testing.assert_allclose(compute_basis(moved, k=10).eigenvalues[1:], base[1:], rtol=1e-8)
    scaled = TriangleMesh(mesh.vertices * 2.0, mesh.faces)
    np.testing.assert_allclose(compute_basis(scaled, k=10).eigenvalues[1:], base[1:] / 4.0, rtol=1e-8)


def test_k_must_be_below_vertex_count(tetra):
    with pytest.raises(ParameterError):
        compute_basis(tetra, k=4)
    with pytest.raises(ParameterError):
        compute_basis(tetra, k=0)


def test_full_basis_has_n_modes(small_sheet, small_sheet_full_basis):
    assert small_sheet_full_basis.k == small_sheet.n_vertices
    np.testing.assert_allclose(_mass_gram(small_sheet_full_basis), np.eye(small_sheet.n_vertices), atol=1e-8)


def test_project_and_reconstruct(medium_sheet_basis):
    basis = medium_sheet_basis
    e3 = np.zeros(basis.k)
    e3[3] = 1.0
    np.testing.assert_allclose(project(basis, basis.eigenvectors[:, 3]), e3, atol=1e-8)
    np.testing.assert_allclose(project(basis, np.zeros(basis.n)), 0.0)
    combo = 2 * basis.eigenvectors[:, 0] - basis.eigenvectors[:, 1]
    expected = np.zeros(basis.k)
    expected[:2] = [2.0, -1.0]
    np.testing.assert_allclose(project(basis, combo), expected, atol=1e-8)

    np.testing.assert_allclose(reconstruct(basis, e3), basis.eigenvectors[:, 3])
    a = np.random.default_rng(0).normal(size=basis.k)
    np.testing.assert_allclose(project(basis, reconstruct(basis, a)), a, atol=1e-8)
    np.testing.assert_allclose(reconstruct(basis, project(basis, combo)), combo, atol=1e-8)


def test_projection_dimension_errors(medium_sheet_basis):
    with pytest.raises(DimensionError):
        project(medium_sheet_basis, np.zeros(3))
    with pytest.raises(DimensionError):
        reconstruct(medium_sheet_basis, np.zeros(medium_sheet_basis.k + 1))


def test_truncate_keeps_leading_modes(medium_sheet_basis):
    small = truncate(medium_sheet_basis, 5)
    assert small.k == 5
    np.testing.assert_array_equal(small.eigenvalues, medium_sheet_basis.eigenvalues[:5])
    with pytest.raises(ParameterError):
        truncate(medium_sheet_basis, medium_sheet_basis.k + 1)


def test_sampled_projector_all_vertices_equals_pinv(medium_sheet_basis):
    indices = np.arange(medium_sheet_basis.n)
    phi_s, P = sampled_projector(medium_sheet_basis, indices)
    np.testing.assert_allclose(P, medium_sheet_basis.pinv, atol=1e-8)


def test_sampled_projector_fits_band_limited_function(medium_sheet_basis):
    basis = medium_sheet_basis
    rng = np.random.default_rng(3)
    a = rng.normal(size=basis.k)
    f = basis.eigenvectors @ a
    indices = np.sort(rng.choice(basis.n, size=120, replace=False))
    _, P = sampled_projector(basis, indices)
    np.testing.assert_allclose(P @ f[indices], a, atol=1e-6)


def test_basis_cache_round_trip_and_hash_check(tmp_path, medium_sheet, medium_sheet_basis):
    path = str(tmp_path / "sheet.basis.npz")
    save_basis(medium_sheet_basis, path)
    loaded = load_basis(path, expected_hash=medium_sheet.content_hash(), min_k=10)
    np.testing.assert_array_equal(loaded.eigenvectors, medium_sheet_basis.eigenvectors)
    np.testing.assert_array_equal(loaded.mass, medium_sheet_basis.mass)
    with pytest.raises(CacheMismatchError):
        load_basis(path, expected_hash="0" * 64)
    with pytest.raises(CacheMismatchError):
        load_basis(path, min_k=medium_sheet_basis.k + 1)
