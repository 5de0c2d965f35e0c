"""
Laplace-Beltrami Spectral Basis

This module assembles the cotangent Laplacian of a triangle mesh, solves the
generalized eigenproblem W phi = lambda M phi for the smallest eigenpairs with
a lumped mass matrix, and provides projection onto / reconstruction from the
truncated basis. Bases can be cached to disk keyed by the mesh content hash.
"""

import time
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
import scipy.sparse.linalg as sla

from .errors import ParameterError, NumericalError, DimensionError, CacheMismatchError, DataError
from .mesh_core import vertex_areas
from .utils.io_utils import atomic_path

logger = logging.getLogger("spectral_basis")

DEFAULT_K = 120
COT_CLAMP = 1e8
# Below this many vertices the dense generalized solver is both faster and exact.
DENSE_MAX_VERTICES = 400
CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LaplaceBasis:
    """
    Truncated Laplace-Beltrami eigensystem of one shape.

    Attributes:
        eigenvalues (np.ndarray): (k,) ascending, nonnegative
        eigenvectors (np.ndarray): (n, k) M-orthonormal columns
        mass (np.ndarray): (n,) lumped vertex areas
        mesh_hash (str): Content hash of the source mesh
        name (str): Shape identifier
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    mesh_hash: str = ""
    name: str = ""

    def __post_init__(self):
        for attr in ("eigenvalues", "eigenvectors", "mass"):
            arr = np.array(getattr(self, attr), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if self.eigenvectors.ndim != 2 or self.eigenvectors.shape[1] != self.eigenvalues.shape[0]:
            raise DimensionError(
                f"eigenvectors {self.eigenvectors.shape} do not match {self.eigenvalues.shape[0]} eigenvalues")
        if self.mass.shape[0] != self.eigenvectors.shape[0]:
            raise DimensionError(f"mass has {self.mass.shape[0]} entries, basis has {self.eigenvectors.shape[0]} rows")

    @property
    def k(self):
        return self.eigenvalues.shape[0]

    @property
    def n(self):
        return self.eigenvectors.shape[0]

    @property
    def pinv(self):
        """Mass-weighted pseudoinverse Phi^T M, shape (k, n)."""
        return (self.eigenvectors * self.mass[:, None]).T


def cotan_laplacian(mesh):
    """
    Cotangent stiffness matrix of a triangle mesh.

    Off-diagonal entries are -(cot a + cot b) / 2 for the two angles opposite
    an edge; the diagonal makes every row sum to zero.

    Args:
        mesh (TriangleMesh): Input mesh

    Returns:
        scipy.sparse.csr_matrix: Symmetric (n, n) positive semidefinite matrix
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    clamped = 0
    for corner in range(3):
        i = f[:, corner]
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        u = v[j] - v[i]
        w = v[k] - v[i]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        dot = np.einsum('ij,ij->i', u, w)
        with np.errstate(divide='ignore', invalid='ignore'):
            cot = dot / cross
        too_large = ~np.isfinite(cot) | (np.abs(cot) > COT_CLAMP)
        if np.any(too_large):
            clamped += int(too_large.sum())
            cot = np.where(too_large, np.sign(np.nan_to_num(dot, nan=1.0)) * COT_CLAMP, cot)
        # angle at i is opposite edge (j, k)
        rows.extend([j, k])
        cols.extend([k, j])
        vals.extend([-0.5 * cot, -0.5 * cot])
    if clamped:
        logger.warning(f"Clamped {clamped} cotangent weights of near-degenerate triangles in '{mesh.name}'")

    off = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def compute_basis(mesh, k=DEFAULT_K, sigma=-1e-8, tol=1e-10, max_restarts=300):
    """
    Compute the k smallest Laplace-Beltrami eigenpairs of a mesh.

    Args:
        mesh (TriangleMesh): Input mesh
        k (int): Basis size, 1 <= k < n
        sigma (float): Shift for the shift-invert iteration
        tol (float): Eigensolver relative tolerance
        max_restarts (int): Maximum number of Arnoldi restarts

    Returns:
        LaplaceBasis: M-orthonormal basis, columns sign-fixed so the entry of
        largest magnitude is positive
    """
    n = mesh.n_vertices
    if k < 1 or k >= n:
        raise ParameterError(f"basis size k={k} must satisfy 1 <= k < n={n} for mesh '{mesh.name}'")

    start = time.time()
    W = cotan_laplacian(mesh)
    mass = vertex_areas(mesh)
    if n <= DENSE_MAX_VERTICES:
        evals, evecs = _dense_eigensystem(W, mass, mesh.name)
        evals, evecs = evals[:k], evecs[:, :k]
    else:
        M = sparse.diags(mass).tocsc()
        try:
            evals, evecs = sla.eigsh(W.tocsc(), k=k, M=M, sigma=sigma, which='LM',
                                     tol=tol, maxiter=max_restarts)
        except sla.ArpackNoConvergence as e:
            logger.error(f"Eigensolver did not converge for '{mesh.name}'")
            raise NumericalError(
                f"eigensolver did not converge for mesh '{mesh.name}' (k={k}, max_restarts={max_restarts}): "
                f"{len(e.eigenvalues)} of {k} eigenpairs converged")
        except RuntimeError as e:
            raise NumericalError(f"eigensolver failed for mesh '{mesh.name}': {e}")

    evals, evecs = _finalize(evals, evecs, mass)
    logger.info(f"Computed k={k} basis for '{mesh.name}' ({n} vertices) in {time.time() - start:.2f}s")
    return LaplaceBasis(evals, evecs, mass, mesh_hash=mesh.content_hash(), name=mesh.name)


def compute_full_basis(mesh):
    """
    Complete eigenbasis (k = n) from the dense generalized eigensolver.

    Only sensible for small meshes; used where an exactly invertible basis is needed.
    """
    W = cotan_laplacian(mesh)
    mass = vertex_areas(mesh)
    evals, evecs = _dense_eigensystem(W, mass, mesh.name)
    evals, evecs = _finalize(evals, evecs, mass)
    return LaplaceBasis(evals, evecs, mass, mesh_hash=mesh.content_hash(), name=mesh.name)


def _dense_eigensystem(W, mass, name):
    try:
        return scipy.linalg.eigh(W.toarray(), np.diag(mass))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"dense eigensolver failed for mesh '{name}': {e}")


def _finalize(evals, evecs, mass):
    order = np.argsort(evals)
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    # symmetric re-orthonormalization in the mass inner product
    gram = evecs.T @ (evecs * mass[:, None])
    s, U = np.linalg.eigh(gram)
    evecs = evecs @ (U * (1.0 / np.sqrt(s))) @ U.T

    pivots = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivots, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evals, evecs * signs


def truncate(basis, k):
    """First k eigenpairs of a basis."""
    if k < 1 or k > basis.k:
        raise ParameterError(f"cannot truncate a k={basis.k} basis to k={k}")
    return LaplaceBasis(basis.eigenvalues[:k], basis.eigenvectors[:, :k], basis.mass,
                        mesh_hash=basis.mesh_hash, name=basis.name)


def project(basis, f):
    """
    Spectral coefficients a = Phi^T M f.

    Args:
        basis (LaplaceBasis): Basis of the shape
        f (np.ndarray): (n,) function or (n, d) stack of functions

    Returns:
        np.ndarray: (k,) or (k, d) coefficients
    """
    f = np.asarray(f)
    if f.shape[0] != basis.n:
        raise DimensionError(f"function has {f.shape[0]} values, basis has {basis.n} vertices")
    return basis.pinv @ f


def reconstruct(basis, a):
    """
    Per-vertex values f = Phi a.

    Args:
        basis (LaplaceBasis): Basis of the shape
        a (np.ndarray): (k,) or (k, d) coefficients

    Returns:
        np.ndarray: (n,) or (n, d) values
    """
    a = np.asarray(a)
    if a.shape[0] != basis.k:
        raise DimensionError(f"coefficients have {a.shape[0]} rows, basis has k={basis.k}")
    return basis.eigenvectors @ a


def sampled_projector(basis, indices, rcond=1e-10):
    """
    Mass-weighted least-squares projector of the basis restricted to sampled vertices.

    For rows Phi_s and masses m_s of the sampled vertices returns
    P_s = (Phi_s^T M_s Phi_s)^-1 Phi_s^T M_s, so that P_s f_s fits coefficients to
    the sampled values. With all vertices sampled P_s equals Phi^T M.

    Args:
        basis (LaplaceBasis): Full basis
        indices (np.ndarray): Sampled vertex indices
        rcond (float): Reciprocal condition number below which the Gram is singular

    Returns:
        tuple: (Phi_s (s, k), P_s (k, s))
    """
    phi_s = basis.eigenvectors[indices]
    weighted = phi_s * basis.mass[indices][:, None]
    gram = phi_s.T @ weighted
    try:
        factor = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError:
        raise NumericalError(f"sampled basis Gram of '{basis.name}' is not positive definite")
    diag = np.diag(factor[0])
    if diag.min() ** 2 < rcond * diag.max() ** 2:
        raise NumericalError(f"sampled basis Gram of '{basis.name}' is singular "
                             f"({len(indices)} samples, k={basis.k})")
    return phi_s, scipy.linalg.cho_solve(factor, weighted.T)


def eigen_residuals(mesh, basis):
    """Relative residuals ||W phi - lambda M phi|| / ||M phi|| for every eigenpair."""
    W = cotan_laplacian(mesh)
    Mphi = basis.eigenvectors * basis.mass[:, None]
    R = W @ basis.eigenvectors - Mphi * basis.eigenvalues[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(Mphi, axis=0)


def save_basis(basis, path):
    """Write a basis cache (.npz) atomically."""
    with atomic_path(path) as tmp:
        with open(tmp, 'wb') as fh:
            np.savez(fh, format_version=CACHE_FORMAT_VERSION, k=basis.k,
                     eigenvalues=basis.eigenvalues, eigenvectors=np.ascontiguousarray(basis.eigenvectors),
                     mass=basis.mass, mesh_hash=np.array(basis.mesh_hash), name=np.array(basis.name))
    logger.info(f"Saved k={basis.k} basis of '{basis.name}' to {path}")


def load_basis(path, expected_hash=None, min_k=None):
    """
    Load a basis cache, rejecting one built from a different mesh.

    Args:
        path (str): Cache file
        expected_hash (str, optional): Content hash the cache must carry
        min_k (int, optional): Minimum basis size required

    Returns:
        LaplaceBasis: Cached basis
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CACHE_FORMAT_VERSION:
                raise CacheMismatchError(f"basis cache {path} has format version {version}")
            basis = LaplaceBasis(data["eigenvalues"], data["eigenvectors"], data["mass"],
                                 mesh_hash=str(data["mesh_hash"]), name=str(data["name"]))
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"cannot read basis cache {path}: {e}")
    if expected_hash is not None and basis.mesh_hash != expected_hash:
        raise CacheMismatchError(f"basis cache {path} was computed from a different mesh")
    if min_k is not None and basis.k < min_k:
        raise CacheMismatchError(f"basis cache {path} holds k={basis.k} < requested {min_k}")
    return basis
