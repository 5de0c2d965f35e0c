"""
Functional Map Estimation

Least-squares estimation of a functional map from spectral descriptor
coefficients, its reverse-mode derivative, and the Laplacian-regularised
solve used by the axiomatic baseline.

Conventions: A1 is (k1, d), A2 is (k2, d); the map C12 is (k2, k1) and sends
coefficients on shape 1 to coefficients on shape 2.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import DataError, DimensionError, NumericalError, ParameterError
from .utils.io_utils import atomic_path

logger = logging.getLogger("fmap_solver")

RIDGE_SCALE = 1e-9


@dataclass(frozen=True, eq=False)
class FunctionalMap:
    """A functional map matrix tagged with the ordered shape pair it maps between."""

    matrix: np.ndarray
    source: str = ""
    target: str = ""

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def direction(self):
        return f"{self.source}->{self.target}"


def _check_pair(A1, A2):
    if A1.ndim != 2 or A2.ndim != 2:
        raise DimensionError(f"spectral descriptors must be 2-D, got {A1.shape} and {A2.shape}")
    if A1.shape[1] != A2.shape[1]:
        raise DimensionError(f"descriptor counts differ: {A1.shape[1]} vs {A2.shape[1]}")
    if A1.shape[1] < 1:
        raise DimensionError("at least one descriptor is required")


def _ridge(gram):
    k = gram.shape[0]
    return RIDGE_SCALE * np.trace(gram) / k


def _gram(A1):
    gram = A1 @ A1.T
    eps = _ridge(gram)
    gram[np.diag_indices_from(gram)] += eps
    return gram


def _factor(gram):
    try:
        return scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError:
        raise NumericalError("descriptor Gram matrix is not positive definite")


def solve_fmap(A1, A2, warn_underdetermined=True):
    """
    C = argmin ||C A1 - A2||_F^2 with a tiny trace-scaled ridge.

    The solve runs in double precision whatever the input type.

    Args:
        A1 (np.ndarray): (k1, d) coefficients of the descriptors on shape 1
        A2 (np.ndarray): (k2, d) coefficients of the descriptors on shape 2
        warn_underdetermined (bool): Log a warning when d < k1

    Returns:
        np.ndarray: (k2, k1) functional map A2 A1^T (A1 A1^T + eps I)^-1
    """
    A1 = np.asarray(A1, dtype=np.float64)
    A2 = np.asarray(A2, dtype=np.float64)
    _check_pair(A1, A2)
    if warn_underdetermined and A1.shape[1] < A1.shape[0]:
        logger.warning(f"Underdetermined functional map solve: d={A1.shape[1]} < k1={A1.shape[0]}")
    factor = _factor(_gram(A1))
    return scipy.linalg.cho_solve(factor, A1 @ A2.T).T


def solve_fmap_backward(A1, A2, C, grad_C):
    """
    Reverse-mode derivative of ``solve_fmap``.

    With G = A1 A1^T + eps(A1) I and C = A2 A1^T G^-1, write H = grad_C G^-1.
    Then dE/dA2 = H A1 and dE/dA1 = H^T A2 + (Gbar + Gbar^T) A1 + 2 eps' tr(Gbar) A1
    where Gbar = -C^T H and eps' = eps / tr(A1 A1^T).

    Args:
        A1 (np.ndarray): (k1, d) input of the forward solve
        A2 (np.ndarray): (k2, d) input of the forward solve
        C (np.ndarray): (k2, k1) output of the forward solve
        grad_C (np.ndarray): (k2, k1) dE/dC

    Returns:
        tuple: (grad_A1 (k1, d), grad_A2 (k2, d))
    """
    A1 = np.asarray(A1, dtype=np.float64)
    A2 = np.asarray(A2, dtype=np.float64)
    _check_pair(A1, A2)
    k1, k2 = A1.shape[0], A2.shape[0]
    if C.shape != (k2, k1) or grad_C.shape != (k2, k1):
        raise DimensionError(f"expected ({k2}, {k1}) map and gradient, got {C.shape} and {grad_C.shape}")

    factor = _factor(_gram(A1))
    H = scipy.linalg.cho_solve(factor, np.asarray(grad_C, dtype=np.float64).T).T
    gram_bar = -np.asarray(C, dtype=np.float64).T @ H
    ridge_bar = RIDGE_SCALE / k1 * np.trace(gram_bar)

    grad_A2 = H @ A1
    grad_A1 = H.T @ A2 + (gram_bar + gram_bar.T) @ A1 + 2.0 * ridge_bar * A1
    return grad_A1, grad_A2


def solve_fmap_regularized(A1, A2, evals1, evals2, alpha):
    """
    C = argmin ||C A1 - A2||^2 + alpha ||C L1 - L2 C||^2 with diagonal L1, L2.

    The commutativity term separates over rows of C: row i solves
    (A1 A1^T + alpha diag((evals1 - evals2[i])^2) + eps I) c_i = A1 A2[i]^T.

    Args:
        A1 (np.ndarray): (k1, d)
        A2 (np.ndarray): (k2, d)
        evals1 (np.ndarray): (k1,) eigenvalues of shape 1
        evals2 (np.ndarray): (k2,) eigenvalues of shape 2
        alpha (float): Weight of the Laplacian commutativity term (>= 0)

    Returns:
        np.ndarray: (k2, k1) functional map
    """
    A1 = np.asarray(A1, dtype=np.float64)
    A2 = np.asarray(A2, dtype=np.float64)
    _check_pair(A1, A2)
    evals1 = np.asarray(evals1, dtype=np.float64)
    evals2 = np.asarray(evals2, dtype=np.float64)
    k1, k2 = A1.shape[0], A2.shape[0]
    if evals1.shape != (k1,) or evals2.shape != (k2,):
        raise DimensionError(f"eigenvalue vectors {evals1.shape}, {evals2.shape} do not match k1={k1}, k2={k2}")
    if alpha < 0:
        raise ParameterError(f"alpha must be >= 0, got {alpha}")

    gram = _gram(A1)
    rhs = A1 @ A2.T
    C = np.empty((k2, k1))
    for i in range(k2):
        system = gram + np.diag(alpha * (evals1 - evals2[i]) ** 2)
        try:
            C[i] = scipy.linalg.solve(system, rhs[:, i], assume_a='pos')
        except np.linalg.LinAlgError:
            raise NumericalError(f"regularized functional map system for row {i} is singular")
    return C


def fmap_objective(C, A1, A2, evals1=None, evals2=None, alpha=0.0):
    """Value of the (optionally regularised) least-squares objective at C."""
    value = np.sum((C @ A1 - A2) ** 2)
    if alpha:
        D = (np.asarray(evals1)[None, :] - np.asarray(evals2)[:, None]) ** 2
        value += alpha * np.sum(C ** 2 * D)
    return float(value)


def save_fmap(fmap, path):
    """Write a functional map as CSV: k2 rows, k1 columns."""
    matrix = fmap.matrix if isinstance(fmap, FunctionalMap) else np.asarray(fmap)
    with atomic_path(path) as tmp:
        pd.DataFrame(matrix).to_csv(tmp, header=False, index=False, float_format="%.17g")
    logger.info(f"Saved {matrix.shape[0]}x{matrix.shape[1]} functional map to {path}")


def load_fmap(path, source="", target=""):
    try:
        matrix = pd.read_csv(path, header=None).to_numpy(dtype=np.float64)
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read functional map {path}: {e}")
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"functional map {path} contains non-finite entries")
    return FunctionalMap(matrix, source=source, target=target)
