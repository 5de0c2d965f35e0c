"""
Pointwise Maps

Conversion between functional maps and vertex-to-vertex correspondences:
nearest neighbours in the spectral embedding, spectral ICP refinement and the
pull-back of a pointwise map into the reduced bases.

A functional map C12 (k2, k1) carries functions on S1 to functions on S2 by
composition g = f o T, so the pointwise map it encodes runs the other way,
T: S2 -> S1. A PointMap stores T as one source index per target vertex.
"""

import io
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError, ParameterError
from .utils.io_utils import atomic_write, read_text_lines

logger = logging.getLogger("pointwise_map")

DEFAULT_ICP_ITERS = 30


@dataclass(frozen=True, eq=False)
class PointMap:
    """Correspondence T: target -> source, one source vertex index per target vertex."""

    target_to_source: np.ndarray
    source: str = ""
    target: str = ""

    def __post_init__(self):
        values = np.asarray(self.target_to_source)
        if values.ndim != 1:
            raise DataError(f"point map must be 1-D, got shape {values.shape}")
        if values.size and not np.issubdtype(values.dtype, np.integer):
            raise DataError("point map entries must be integers")
        if values.size and values.min() < 0:
            raise DataError(f"point map has negative entry {values.min()}")
        object.__setattr__(self, "target_to_source", values.astype(np.int64))

    def __len__(self):
        return self.target_to_source.shape[0]

    def validate(self, n_source, n_target=None):
        """Check entries lie in [0, n_source) and, optionally, the length."""
        if n_target is not None and len(self) != n_target:
            raise DimensionError(f"point map has {len(self)} entries, target has {n_target} vertices")
        if len(self) and self.target_to_source.max() >= n_source:
            bad = int(np.argmax(self.target_to_source >= n_source))
            raise DataError(f"point map entry {bad} = {self.target_to_source[bad]} is out of range "
                            f"for a source with {n_source} vertices")
        return self

    def identity_fraction(self):
        return float(np.mean(self.target_to_source == np.arange(len(self))))


def _nearest_rows(queries, points, n_jobs=1):
    # duplicate rows collapse onto their smallest index
    unique_rows, first_index = np.unique(points, axis=0, return_index=True)
    tree = cKDTree(unique_rows)
    dist, nearest = tree.query(queries, k=1, workers=n_jobs)
    return first_index[nearest], dist


def fmap_to_p2p(C12, basis1, basis2, n_jobs=1):
    """
    Pointwise map from a functional map by nearest neighbours in the spectral embedding.

    For every vertex y of S2, T(y) is the vertex x of S1 whose row of Phi1 is
    nearest to row y of Phi2 C12. Ties go to the smallest index.

    Args:
        C12 (np.ndarray): (k2, k1) functional map
        basis1 (LaplaceBasis): Basis of the source shape S1
        basis2 (LaplaceBasis): Basis of the target shape S2
        n_jobs (int): KD-tree query workers

    Returns:
        PointMap: T: S2 -> S1
    """
    C12 = np.asarray(C12)
    if C12.ndim != 2 or C12.size == 0:
        raise ParameterError(f"functional map must be a non-empty matrix, got shape {C12.shape}")
    k2, k1 = C12.shape
    if k1 > basis1.k or k2 > basis2.k:
        raise DimensionError(f"map of shape {C12.shape} exceeds bases k1={basis1.k}, k2={basis2.k}")
    T, _ = _nearest_rows(basis2.eigenvectors[:, :k2] @ C12, basis1.eigenvectors[:, :k1], n_jobs)
    return PointMap(T, source=basis1.name, target=basis2.name)


def nn_residual(C12, point_map, basis1, basis2):
    """Mean over target vertices of ||(Phi2 C12)_y - (Phi1)_T(y)||."""
    k2, k1 = C12.shape
    embedded = basis2.eigenvectors[:, :k2] @ C12
    matched = basis1.eigenvectors[point_map.target_to_source, :k1]
    return float(np.mean(np.linalg.norm(embedded - matched, axis=1)))


def _procrustes(phi2, phi1_matched):
    U, _, Vt = np.linalg.svd(phi2.T @ phi1_matched)
    return U @ Vt


def icp_refine(C12, basis1, basis2, max_iters=DEFAULT_ICP_ITERS, tol=0.0, n_jobs=1):
    """
    Spectral ICP: alternate nearest-neighbour matching and orthogonal Procrustes.

    The first Procrustes update is always taken so the result is orthogonal.
    Later updates are kept only when they do not increase the mean residual.

    Args:
        C12 (np.ndarray): (k, k) initial functional map
        basis1, basis2 (LaplaceBasis): Source and target bases
        max_iters (int): Iteration budget
        tol (float): Stop when an accepted step lowers the residual by less than this
        n_jobs (int): KD-tree query workers

    Returns:
        tuple: (refined C12, PointMap, mean residuals). history[0] is the residual of
            the input map and may be lower than history[1]; entries from index 1 on
            never increase.
    """
    C = np.asarray(C12, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ParameterError(f"ICP refinement needs a square functional map, got shape {C.shape}")
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")
    k = C.shape[0]
    phi1 = basis1.eigenvectors[:, :k]
    phi2 = basis2.eigenvectors[:, :k]

    T = fmap_to_p2p(C, basis1, basis2, n_jobs)
    residual = nn_residual(C, T, basis1, basis2)
    history = [residual]
    for iteration in range(max_iters):
        try:
            C_new = _procrustes(phi2, phi1[T.target_to_source])
        except np.linalg.LinAlgError as e:
            logger.warning(f"ICP stopped at iteration {iteration}: SVD failed ({e})")
            break
        T_new = fmap_to_p2p(C_new, basis1, basis2, n_jobs)
        residual_new = nn_residual(C_new, T_new, basis1, basis2)
        if iteration > 0 and residual_new > residual:
            logger.debug(f"ICP iteration {iteration} rejected: residual {residual_new:.6g} > {residual:.6g}")
            break
        converged = np.array_equal(T_new.target_to_source, T.target_to_source)
        small_gain = tol > 0 and residual - residual_new < tol
        C, T, residual = C_new, T_new, residual_new
        history.append(residual)
        if converged or small_gain:
            break
    logger.info(f"ICP finished after {len(history) - 1} accepted updates, residual {history[0]:.6g} -> {history[-1]:.6g}")
    return C, T, history


def p2p_to_fmap(point_map, basis1, basis2):
    """
    Functional map C12 = Phi2^T M2 Phi1[T] induced by T: S2 -> S1.

    Args:
        point_map (PointMap): T with one S1 index per S2 vertex
        basis1 (LaplaceBasis): Basis of S1
        basis2 (LaplaceBasis): Basis of S2

    Returns:
        np.ndarray: (k2, k1) functional map
    """
    point_map.validate(basis1.n, basis2.n)
    return basis2.pinv @ basis1.eigenvectors[point_map.target_to_source]


def save_point_map(point_map, path):
    """One 0-based source index per line after a header comment."""
    with atomic_write(path) as fh:
        fh.write(f"# source={point_map.source or '-'} target={point_map.target or '-'} direction=target->source\n")
        for index in point_map.target_to_source:
            fh.write(f"{int(index)}\n")
    logger.info(f"Saved point map with {len(point_map)} entries to {path}")


def load_point_map(path, n_source=None, n_target=None):
    """
    Read a point map file; lines starting with '#' are comments.

    Args:
        path (str): Map file
        n_source (int, optional): Source vertex count to validate entries against
        n_target (int, optional): Expected number of entries

    Returns:
        PointMap: Parsed map
    """
    source = target = ""
    try:
        lines = read_text_lines(path)
        first = lines[0] if lines else ""
        if first.startswith("#"):
            tags = dict(token.split("=", 1) for token in first[1:].split() if "=" in token)
            source = "" if tags.get("source") == "-" else tags.get("source", "")
            target = "" if tags.get("target") == "-" else tags.get("target", "")
        frame = pd.read_csv(io.StringIO("".join(lines)), header=None, comment="#", sep=r"\s+")
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(np.zeros((0, 1), dtype=np.int64))
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read point map {path}: {e}")
    if frame.shape[1] != 1:
        raise DataError(f"point map {path} must have one index per line, found {frame.shape[1]} columns")
    column = frame.iloc[:, 0]
    if not pd.api.types.is_integer_dtype(column):
        raise DataError(f"point map {path} contains non-integer entries")
    point_map = PointMap(column.to_numpy(dtype=np.int64), source=source, target=target)
    if n_source is not None:
        point_map.validate(n_source, n_target)
    elif n_target is not None and len(point_map) != n_target:
        raise DimensionError(f"point map {path} has {len(point_map)} entries, expected {n_target}")
    return point_map
