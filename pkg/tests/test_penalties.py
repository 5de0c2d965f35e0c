import math

import numpy as np
import pytest

from fmapnet.config import PenaltyWeights
from fmapnet.errors import DimensionError
from fmapnet.penalties import (e1_bijectivity, e2_orthogonality, e3_laplacian_commutativity, e3_matrix_form,
                               e4_descriptor_commutativity, mult_operator, mult_operators, mult_operators_backward,
                               total_energy)
from fmapnet.spectral_basis import truncate


def _rotation(degrees):
    t = math.radians(degrees)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _random_ops(rng, p, k):
    X = rng.normal(size=(p, k, k))
    return X + np.swapaxes(X, 1, 2)


# E1

def test_e1_zero_at_identity():
    value, g12, g21 = e1_bijectivity(np.eye(3), np.eye(3))
    assert value == 0.0
    assert not np.any(g12)
    assert not np.any(g21)


def test_e1_hand_value():
    value, _, _ = e1_bijectivity(2 * np.eye(2), np.eye(2))
    assert value == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(20))
def test_e1_gradient(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    _, g12, g21 = e1_bijectivity(C12, C21)
    assert relative_error(g12, numerical_gradient(lambda X: e1_bijectivity(X, C21)[0], C12)) < 1e-6
    assert relative_error(g21, numerical_gradient(lambda X: e1_bijectivity(C12, X)[0], C21)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_e1_rectangular_gradient(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(5, 3)), rng.normal(size=(3, 5))
    _, g12, g21 = e1_bijectivity(C12, C21)
    assert relative_error(g12, numerical_gradient(lambda X: e1_bijectivity(X, C21)[0], C12)) < 1e-6
    assert relative_error(g21, numerical_gradient(lambda X: e1_bijectivity(C12, X)[0], C21)) < 1e-6


def test_map_shapes_must_be_transposed(rng):
    with pytest.raises(DimensionError):
        e1_bijectivity(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))


# E2

def test_e2_rotation_is_orthonormal():
    value, g12, _ = e2_orthogonality(_rotation(37), np.eye(2))
    assert value == pytest.approx(0.0, abs=1e-24)
    np.testing.assert_allclose(g12, 0.0, atol=1e-12)


def test_e2_hand_value():
    value, _, _ = e2_orthogonality(np.diag([2.0, 1.0]), np.eye(2))
    assert value == pytest.approx(9.0)


@pytest.mark.parametrize("seed", range(20))
def test_e2_gradient(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    _, g12, g21 = e2_orthogonality(C12, C21)
    assert relative_error(g12, numerical_gradient(lambda X: e2_orthogonality(X, C21)[0], C12)) < 1e-6
    assert relative_error(g21, numerical_gradient(lambda X: e2_orthogonality(C12, X)[0], C21)) < 1e-6


# E3

def test_e3_commuting_diagonals():
    evals = np.array([0.0, 1.0, 3.0])
    value, _, _ = e3_laplacian_commutativity(np.diag([1.0, -2.0, 0.5]), np.diag([3.0, 1.0, 1.0]), evals, evals)
    assert value == 0.0


def test_e3_hand_value():
    value, _, _ = e3_laplacian_commutativity(np.eye(2), np.zeros((2, 2)), np.array([0.0, 1.0]),
                                             np.array([0.0, 2.0]))
    assert value == pytest.approx(1.0)


def test_e3_elementwise_matches_matrix_form(rng):
    C12, C21 = rng.normal(size=(5, 4)), rng.normal(size=(4, 5))
    evals1, evals2 = np.sort(rng.uniform(0, 10, 4)), np.sort(rng.uniform(0, 10, 5))
    value, _, _ = e3_laplacian_commutativity(C12, C21, evals1, evals2)
    assert value == pytest.approx(e3_matrix_form(C12, C21, evals1, evals2), abs=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_e3_gradient(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    evals1, evals2 = np.sort(rng.uniform(0, 5, 6)), np.sort(rng.uniform(0, 5, 6))
    _, g12, g21 = e3_laplacian_commutativity(C12, C21, evals1, evals2)
    num12 = numerical_gradient(lambda X: e3_laplacian_commutativity(X, C21, evals1, evals2)[0], C12)
    num21 = numerical_gradient(lambda X: e3_laplacian_commutativity(C12, X, evals1, evals2)[0], C21)
    assert relative_error(g12, num12) < 1e-6
    assert relative_error(g21, num21) < 1e-6


# multiplicative operators

def test_mult_operator_of_constants(medium_sheet_basis):
    basis = medium_sheet_basis
    np.testing.assert_allclose(mult_operator(basis, np.ones(basis.n)), np.eye(basis.k), atol=1e-8)
    np.testing.assert_allclose(mult_operator(basis, np.full(basis.n, 2.5)), 2.5 * np.eye(basis.k), atol=1e-8)


def test_mult_operator_symmetric(medium_sheet_basis, rng):
    op = mult_operator(medium_sheet_basis, rng.normal(size=medium_sheet_basis.n))
    np.testing.assert_allclose(op, op.T, atol=1e-8)


def test_mult_operator_complete_basis_spectrum(small_sheet_full_basis, rng):
    basis = small_sheet_full_basis
    f = basis.eigenvectors[:, 3] * rng.uniform(0.5, 1.5, size=basis.n)
    eigenvalues = np.linalg.eigvalsh(mult_operator(basis, f))
    np.testing.assert_allclose(eigenvalues, np.sort(f), atol=1e-6)


def test_mult_operators_stack_matches_single(medium_sheet_basis, rng):
    basis = medium_sheet_basis
    F = rng.normal(size=(basis.n, 3))
    ops = mult_operators(basis.pinv, F, basis.eigenvectors)
    assert ops.shape == (3, basis.k, basis.k)
    for i in range(3):
        np.testing.assert_allclose(ops[i], mult_operator(basis, F[:, i]), atol=1e-10)


# E4

def test_e4_identity_operators_commute(rng):
    ops = np.stack([np.eye(4)] * 3)
    value, *_ = e4_descriptor_commutativity(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), ops, ops)
    assert value == pytest.approx(0.0, abs=1e-20)


def test_e4_hand_value():
    Mf = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    Mg = np.eye(2)[None]
    value, *_ = e4_descriptor_commutativity(np.eye(2), np.zeros((2, 2)), Mf, Mg)
    assert value == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(20))
def test_e4_gradients_with_respect_to_maps_and_operators(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(5, 4)), rng.normal(size=(4, 5))
    ops1, ops2 = _random_ops(rng, 3, 4), _random_ops(rng, 3, 5)
    _, g12, g21, gops1, gops2 = e4_descriptor_commutativity(C12, C21, ops1, ops2)
    checks = [
        (g12, lambda X: e4_descriptor_commutativity(X, C21, ops1, ops2)[0], C12),
        (g21, lambda X: e4_descriptor_commutativity(C12, X, ops1, ops2)[0], C21),
        (gops1, lambda X: e4_descriptor_commutativity(C12, C21, X, ops2)[0], ops1),
        (gops2, lambda X: e4_descriptor_commutativity(C12, C21, ops1, X)[0], ops2),
    ]
    for analytic, fn, x in checks:
        assert relative_error(analytic, numerical_gradient(fn, x)) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_e4_gradient_through_descriptor_values(seed, small_sheet_full_basis, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    basis = truncate(small_sheet_full_basis, 5)
    phi, P = basis.eigenvectors, basis.pinv
    F1 = rng.normal(size=(basis.n, 3))
    F2 = rng.normal(size=(basis.n, 3))
    C12, C21 = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    ops2 = mult_operators(P, F2, phi)

    def loss(F):
        return e4_descriptor_commutativity(C12, C21, mult_operators(P, F, phi), ops2)[0]

    _, _, _, gops1, _ = e4_descriptor_commutativity(C12, C21, mult_operators(P, F1, phi), ops2)
    analytic = mult_operators_backward(P, phi, gops1)
    assert analytic.shape == F1.shape
    assert relative_error(analytic, numerical_gradient(loss, F1)) < 1e-5


def test_e4_operator_count_mismatch(rng):
    with pytest.raises(DimensionError):
        e4_descriptor_commutativity(np.eye(3), np.eye(3), _random_ops(rng, 2, 3), _random_ops(rng, 3, 3))


# total energy

def test_total_energy_zero_at_self_map(rng):
    evals = np.array([0.0, 1.0, 2.0, 4.0])
    ops = _random_ops(rng, 2, 4)
    terms = total_energy(np.eye(4), np.eye(4), evals, evals, ops, ops)
    assert terms.value == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(terms.grad_C12, 0.0, atol=1e-12)


def test_total_energy_masking_and_default_weights(rng):
    C12, C21 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    evals1, evals2 = np.sort(rng.uniform(0, 3, 4)), np.sort(rng.uniform(0, 3, 4))
    ops1, ops2 = _random_ops(rng, 2, 4), _random_ops(rng, 2, 4)

    only_e1 = total_energy(C12, C21, evals1, evals2, ops1, ops2, PenaltyWeights(1, 0, 0, 0))
    assert only_e1.value == e1_bijectivity(C12, C21)[0]

    terms = total_energy(C12, C21, evals1, evals2, ops1, ops2)
    a, b, c, d = terms.components
    assert a == pytest.approx(e1_bijectivity(C12, C21)[0])
    assert d == pytest.approx(e4_descriptor_commutativity(C12, C21, ops1, ops2)[0])
    assert terms.value == pytest.approx(1e3 * a + 1e3 * b + 1.0 * c + 1e5 * d)
    assert set(terms.as_dict()) == {"loss", "E1", "E2", "E3", "E4"}


@pytest.mark.parametrize("seed", range(20))
def test_total_energy_gradient(seed, numerical_gradient, relative_error):
    rng = np.random.default_rng(seed)
    C12, C21 = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))
    evals1, evals2 = np.sort(rng.uniform(0, 3, 3)), np.sort(rng.uniform(0, 3, 4))
    ops1, ops2 = _random_ops(rng, 2, 3), _random_ops(rng, 2, 4)
    weights = PenaltyWeights(1.0, 2.0, 0.5, 3.0)
    terms = total_energy(C12, C21, evals1, evals2, ops1, ops2, weights)
    num = numerical_gradient(lambda X: total_energy(X, C21, evals1, evals2, ops1, ops2, weights).value, C12)
    assert relative_error(terms.grad_C12, num) < 1e-5


def test_penalties_symmetric_under_pair_swap(rng):
    C12, C21 = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))
    evals1, evals2 = np.sort(rng.uniform(0, 3, 3)), np.sort(rng.uniform(0, 3, 4))
    ops1, ops2 = _random_ops(rng, 2, 3), _random_ops(rng, 2, 4)
    forward = total_energy(C12, C21, evals1, evals2, ops1, ops2)
    swapped = total_energy(C21, C12, evals2, evals1, ops2, ops1)
    np.testing.assert_allclose(forward.components, swapped.components, rtol=1e-12)
