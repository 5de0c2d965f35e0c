"""
Structural Penalties

The four unsupervised energies on a pair of functional maps (C12, C21) and
their analytic gradients:

    E1  bijectivity         ||C12 C21 - I||^2 + ||C21 C12 - I||^2
    E2  orthogonality       ||C12^T C12 - I||^2 + ||C21^T C21 - I||^2
    E3  Laplacian commute   ||C12 L1 - L2 C12||^2 + ||C21 L2 - L1 C21||^2
    E4  descriptor commute  sum_i ||C12 Mf_i - Mg_i C12||^2 + ||C21 Mg_i - Mf_i C21||^2

Shapes: C12 is (k2, k1), C21 is (k1, k2). Multiplicative operators are
stacked as (p, k, k) arrays.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import PenaltyWeights
from .errors import DimensionError

logger = logging.getLogger("penalties")


def _check_maps(C12, C21):
    if C12.ndim != 2 or C21.ndim != 2 or C12.shape != C21.shape[::-1]:
        raise DimensionError(f"C12 {C12.shape} and C21 {C21.shape} are not transposed shapes")


def e1_bijectivity(C12, C21):
    """
    Returns:
        tuple: (value, grad_C12, grad_C21)
    """
    _check_maps(C12, C21)
    k2, k1 = C12.shape
    R1 = C12 @ C21 - np.eye(k2, dtype=C12.dtype)
    R2 = C21 @ C12 - np.eye(k1, dtype=C12.dtype)
    value = np.sum(R1 ** 2) + np.sum(R2 ** 2)
    grad_C12 = 2 * R1 @ C21.T + 2 * C21.T @ R2
    grad_C21 = 2 * C12.T @ R1 + 2 * R2 @ C12.T
    return float(value), grad_C12, grad_C21


def _orthogonality_term(C):
    R = C.T @ C - np.eye(C.shape[1], dtype=C.dtype)
    return np.sum(R ** 2), 4 * C @ R


def e2_orthogonality(C12, C21):
    _check_maps(C12, C21)
    v12, g12 = _orthogonality_term(C12)
    v21, g21 = _orthogonality_term(C21)
    return float(v12 + v21), g12, g21


def _commute_weights(evals_from, evals_to):
    # D[i, j] = (evals_from[j] - evals_to[i])^2
    return (evals_from[None, :] - evals_to[:, None]) ** 2


def e3_laplacian_commutativity(C12, C21, evals1, evals2):
    """
    Laplacian commutativity in elementwise form.

    Args:
        C12 (np.ndarray): (k2, k1)
        C21 (np.ndarray): (k1, k2)
        evals1 (np.ndarray): (k1,) eigenvalues of shape 1
        evals2 (np.ndarray): (k2,) eigenvalues of shape 2

    Returns:
        tuple: (value, grad_C12, grad_C21)
    """
    _check_maps(C12, C21)
    evals1 = np.asarray(evals1, dtype=C12.dtype)
    evals2 = np.asarray(evals2, dtype=C12.dtype)
    if evals1.shape != (C12.shape[1],) or evals2.shape != (C12.shape[0],):
        raise DimensionError(f"eigenvalues {evals1.shape}, {evals2.shape} do not match C12 {C12.shape}")
    D12 = _commute_weights(evals1, evals2)
    D21 = D12.T
    value = np.sum(C12 ** 2 * D12) + np.sum(C21 ** 2 * D21)
    return float(value), 2 * C12 * D12, 2 * C21 * D21


def e3_matrix_form(C12, C21, evals1, evals2):
    """E3 value through explicit diagonal matrix products."""
    L1 = np.diag(evals1)
    L2 = np.diag(evals2)
    return float(np.sum((C12 @ L1 - L2 @ C12) ** 2) + np.sum((C21 @ L2 - L1 @ C21) ** 2))


def mult_operator(basis, f):
    """
    Reduced-basis operator of pointwise multiplication by f: Phi^T M Diag(f) Phi.

    Args:
        basis (LaplaceBasis): Basis of the shape
        f (np.ndarray): (n,) per-vertex function

    Returns:
        np.ndarray: (k, k) symmetric operator
    """
    f = np.asarray(f)
    if f.shape != (basis.n,):
        raise DimensionError(f"function has shape {f.shape}, basis has {basis.n} vertices")
    return basis.pinv @ (f[:, None] * basis.eigenvectors)


def mult_operators(projector, values, phi):
    """
    Stack of operators P Diag(F[:, i]) Phi, one per column of F.

    Args:
        projector (np.ndarray): (k, s) fitting projector on the sampled vertices
        values (np.ndarray): (s, p) descriptor functions at the sampled vertices
        phi (np.ndarray): (s, k) basis rows of the sampled vertices

    Returns:
        np.ndarray: (p, k, k)
    """
    if projector.shape[1] != values.shape[0] or phi.shape[0] != values.shape[0]:
        raise DimensionError(
            f"projector {projector.shape}, values {values.shape} and basis rows {phi.shape} disagree")
    return np.einsum('kn,nd,nl->dkl', projector, values, phi, optimize=True)


def mult_operators_backward(projector, phi, grad_ops):
    """Gradient of ``mult_operators`` with respect to the (s, p) function values."""
    return np.einsum('kn,dkl,nl->nd', projector, grad_ops, phi, optimize=True)


def e4_descriptor_commutativity(C12, C21, ops1, ops2):
    """
    Descriptor-preservation commutativity over paired operator stacks.

    Args:
        C12 (np.ndarray): (k2, k1)
        C21 (np.ndarray): (k1, k2)
        ops1 (np.ndarray): (p, k1, k1) operators Mf_i on shape 1
        ops2 (np.ndarray): (p, k2, k2) operators Mg_i on shape 2

    Returns:
        tuple: (value, grad_C12, grad_C21, grad_ops1, grad_ops2)
    """
    _check_maps(C12, C21)
    ops1 = np.asarray(ops1)
    ops2 = np.asarray(ops2)
    if ops1.shape[0] != ops2.shape[0]:
        raise DimensionError(f"{ops1.shape[0]} operators on shape 1 but {ops2.shape[0]} on shape 2")
    k2, k1 = C12.shape
    if ops1.shape[1:] != (k1, k1) or ops2.shape[1:] != (k2, k2):
        raise DimensionError(f"operator stacks {ops1.shape}, {ops2.shape} do not match C12 {C12.shape}")

    R = C12 @ ops1 - ops2 @ C12
    S = C21 @ ops2 - ops1 @ C21
    value = np.sum(R ** 2) + np.sum(S ** 2)

    ops1_t = np.swapaxes(ops1, 1, 2)
    ops2_t = np.swapaxes(ops2, 1, 2)
    grad_C12 = 2 * np.sum(R @ ops1_t - ops2_t @ R, axis=0)
    grad_C21 = 2 * np.sum(S @ ops2_t - ops1_t @ S, axis=0)
    grad_ops1 = 2 * (C12.T @ R) - 2 * (S @ C21.T)
    grad_ops2 = -2 * (R @ C12.T) + 2 * (C21.T @ S)
    return float(value), grad_C12, grad_C21, grad_ops1, grad_ops2


@dataclass
class EnergyTerms:
    """Weighted total energy with its components and gradients."""

    value: float
    e1: float
    e2: float
    e3: float
    e4: float
    grad_C12: np.ndarray
    grad_C21: np.ndarray
    grad_ops1: Optional[np.ndarray] = None
    grad_ops2: Optional[np.ndarray] = None

    @property
    def components(self):
        return (self.e1, self.e2, self.e3, self.e4)

    def as_dict(self):
        return {"loss": self.value, "E1": self.e1, "E2": self.e2, "E3": self.e3, "E4": self.e4}


def total_energy(C12, C21, evals1, evals2, ops1=None, ops2=None, weights=None):
    """
    Weighted sum w1 E1 + w2 E2 + w3 E3 + w4 E4 with matching gradients.

    Components are always evaluated so they can be logged, including those
    whose weight is zero.

    Args:
        C12, C21 (np.ndarray): Functional maps
        evals1, evals2 (np.ndarray): Eigenvalues of both shapes
        ops1, ops2 (np.ndarray, optional): Operator stacks for E4; E4 is 0 without them
        weights (PenaltyWeights, optional): Defaults to PenaltyWeights()

    Returns:
        EnergyTerms: Total, components and gradients
    """
    weights = weights or PenaltyWeights()
    w1, w2, w3, w4 = weights.as_tuple()

    e1, g1_12, g1_21 = e1_bijectivity(C12, C21)
    e2, g2_12, g2_21 = e2_orthogonality(C12, C21)
    e3, g3_12, g3_21 = e3_laplacian_commutativity(C12, C21, evals1, evals2)
    grad_C12 = w1 * g1_12 + w2 * g2_12 + w3 * g3_12
    grad_C21 = w1 * g1_21 + w2 * g2_21 + w3 * g3_21

    e4 = 0.0
    grad_ops1 = grad_ops2 = None
    if ops1 is not None and ops2 is not None and len(ops1) > 0:
        e4, g4_12, g4_21, g_ops1, g_ops2 = e4_descriptor_commutativity(C12, C21, ops1, ops2)
        grad_C12 = grad_C12 + w4 * g4_12
        grad_C21 = grad_C21 + w4 * g4_21
        grad_ops1 = w4 * g_ops1
        grad_ops2 = w4 * g_ops2

    value = w1 * e1 + w2 * e2 + w3 * e3 + w4 * e4
    return EnergyTerms(value=float(value), e1=e1, e2=e2, e3=e3, e4=e4,
                       grad_C12=grad_C12, grad_C21=grad_C21, grad_ops1=grad_ops1, grad_ops2=grad_ops2)
