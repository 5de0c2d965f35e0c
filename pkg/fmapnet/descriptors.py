"""
Raw Per-Vertex Descriptors

This module computes the descriptor fields that are fed to the descriptor
network: SHOT histograms (352 dimensions with the default bins), heat kernel
signatures from a Laplace-Beltrami basis, or precomputed descriptors read
from CSV. It also draws the random vertex and descriptor subsets used at
every training step.
"""

import io
import math
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError, NumericalError, ParameterError
from .mesh_core import vertex_normals, shortest_edge_per_vertex
from .utils.io_utils import atomic_path, read_text_lines

logger = logging.getLogger("descriptors")

DESCRIPTOR_KINDS = ("shot", "hks", "external", "transformed")
DEFAULT_SHOT_RADIUS_FRACTION = 0.05
# Vertices per SHOT work unit handed to a worker.
SHOT_BLOCK_SIZE = 512


@dataclass(frozen=True, eq=False)
class DescriptorField:
    """Per-vertex descriptor vectors, one row per vertex."""

    values: np.ndarray
    kind: str = "external"

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError(f"descriptor values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"descriptor field contains non-finite value at row {bad[0]}, column {bad[1]}")
        if self.kind not in DESCRIPTOR_KINDS:
            raise DataError(f"unknown descriptor kind '{self.kind}'")
        object.__setattr__(self, "values", values)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


def compute_shot(mesh, radius=None, azimuth_bins=8, elevation_bins=2, radial_bins=2, hist_bins=11,
                 n_jobs=1):
    """
    SHOT descriptors over the mesh vertices.

    Each vertex gets a local reference frame from the distance-weighted covariance
    of its neighbours within ``radius``. The support sphere is divided into
    azimuth x elevation x radial sectors and each sector holds a histogram of the
    cosine between neighbour normals and the frame's z axis. Contributions are
    spread quadrilinearly over adjacent bins; rows are L2-normalised.

    Args:
        mesh (TriangleMesh): Input mesh
        radius (float, optional): Support radius; 5% of the bounding-box diagonal by default
        azimuth_bins, elevation_bins, radial_bins (int): Spatial grid
        hist_bins (int): Cosine histogram bins
        n_jobs (int): joblib workers over vertex blocks

    Returns:
        DescriptorField: (n, azimuth*elevation*radial*hist) with kind 'shot'
    """
    if radius is None:
        radius = DEFAULT_SHOT_RADIUS_FRACTION * mesh.bounding_box_diagonal
    if radius <= 0:
        raise ParameterError(f"SHOT radius must be > 0, got {radius}")

    normals = vertex_normals(mesh)
    if not np.all(np.isfinite(normals)):
        raise NumericalError(f"non-finite vertex normals in mesh '{mesh.name}'")
    short = shortest_edge_per_vertex(mesh)
    sparse_support = int(np.sum(radius < short))
    if sparse_support:
        logger.warning(f"SHOT radius {radius:.4g} is below the shortest edge at {sparse_support} "
                       f"vertices of '{mesh.name}'; their support is sparse")

    points = mesh.vertices
    tree = cKDTree(points)
    bins = (azimuth_bins, elevation_bins, radial_bins, hist_bins)
    blocks = [np.arange(s, min(s + SHOT_BLOCK_SIZE, mesh.n_vertices))
              for s in range(0, mesh.n_vertices, SHOT_BLOCK_SIZE)]
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_shot_block)(block, points, normals, tree, radius, bins) for block in blocks)
    values = np.vstack(results) if results else np.zeros((0, int(np.prod(bins))))
    logger.info(f"Computed {values.shape[1]}-dim SHOT for '{mesh.name}' (radius {radius:.4g})")
    return DescriptorField(values, kind="shot")


def _shot_block(block, points, normals, tree, radius, bins):
    out = np.zeros((len(block), int(np.prod(bins))))
    neighbourhoods = tree.query_ball_point(points[block], r=radius)
    for row, (vertex, nbrs) in enumerate(zip(block, neighbourhoods)):
        nbrs = np.asarray([j for j in nbrs if j != vertex], dtype=np.int64)
        if nbrs.size < 3:
            continue
        out[row] = _shot_vertex(points[vertex], points[nbrs], normals[nbrs], radius, bins)
    return out


def _local_reference_frame(offsets, dist, radius):
    weights = radius - dist
    cov = (offsets * weights[:, None]).T @ offsets / weights.sum()
    _, vecs = np.linalg.eigh(cov)
    x_axis = vecs[:, 2]
    z_axis = vecs[:, 0]
    # sign disambiguation: axes point towards the weighted majority of the support
    if np.sum(weights * (offsets @ x_axis)) < 0:
        x_axis = -x_axis
    if np.sum(weights * (offsets @ z_axis)) < 0:
        z_axis = -z_axis
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis])


def _soft_bins(coord, count, circular):
    """Linear interpolation weights of a continuous bin coordinate over two bins."""
    shifted = coord - 0.5
    lower = np.floor(shifted)
    frac = shifted - lower
    lower = lower.astype(np.int64)
    upper = lower + 1
    if circular:
        lower %= count
        upper %= count
    else:
        lower = np.clip(lower, 0, count - 1)
        upper = np.clip(upper, 0, count - 1)
    return (lower, upper), (1.0 - frac, frac)


def _shot_vertex(center, neighbours, nbr_normals, radius, bins):
    azimuth_bins, elevation_bins, radial_bins, hist_bins = bins
    offsets = neighbours - center
    dist = np.linalg.norm(offsets, axis=1)
    frame = _local_reference_frame(offsets, dist, radius)
    local = offsets @ frame.T

    azimuth = np.mod(np.arctan2(local[:, 1], local[:, 0]), 2 * np.pi)
    with np.errstate(invalid='ignore', divide='ignore'):
        elevation = np.arcsin(np.clip(np.where(dist > 0, local[:, 2] / dist, 0.0), -1.0, 1.0))
    cosine = np.clip(nbr_normals @ frame[2], -1.0, 1.0)

    coords = [
        (azimuth / (2 * np.pi) * azimuth_bins, azimuth_bins, True),
        ((elevation + np.pi / 2) / np.pi * elevation_bins, elevation_bins, False),
        (dist / radius * radial_bins, radial_bins, False),
        ((cosine + 1.0) / 2.0 * hist_bins, hist_bins, False),
    ]
    per_axis = [_soft_bins(c, count, circular) for c, count, circular in coords]
    strides = (elevation_bins * radial_bins * hist_bins, radial_bins * hist_bins, hist_bins, 1)

    hist = np.zeros(azimuth_bins * elevation_bins * radial_bins * hist_bins)
    for corner in range(16):
        index = np.zeros(len(dist), dtype=np.int64)
        weight = np.ones(len(dist))
        for axis, ((lo, hi), (w_lo, w_hi)) in enumerate(per_axis):
            if (corner >> axis) & 1:
                index += hi * strides[axis]
                weight = weight * w_hi
            else:
                index += lo * strides[axis]
                weight = weight * w_lo
        hist += np.bincount(index, weights=weight, minlength=hist.size)

    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def hks_times(basis, num_times):
    """Log-spaced diffusion times on [4 ln 10 / lambda_max, 4 ln 10 / lambda_1]."""
    evals = basis.eigenvalues
    if basis.k == 1:
        return np.ones(num_times)
    if evals[1] <= 1e-10 * max(evals[-1], 1e-300):
        raise DataError(f"second eigenvalue of '{basis.name}' is zero (disconnected mesh?); HKS undefined")
    t_min = 4 * math.log(10) / evals[-1]
    t_max = 4 * math.log(10) / evals[1]
    return np.geomspace(t_min, t_max, num_times)


def compute_hks(basis, num_times=16):
    """
    Heat kernel signature HKS(x, t) = sum_i exp(-lambda_i t) phi_i(x)^2.

    Args:
        basis (LaplaceBasis): Basis of the shape
        num_times (int): Number of diffusion times

    Returns:
        DescriptorField: (n, num_times), kind 'hks'
    """
    if num_times < 1:
        raise ParameterError(f"num_times must be >= 1, got {num_times}")
    times = hks_times(basis, num_times)
    decay = np.exp(-np.outer(basis.eigenvalues, times))
    return DescriptorField((basis.eigenvectors ** 2) @ decay, kind="hks")


def load_descriptors(path, expected_n):
    """
    Read a descriptor CSV: one vertex per row, comma-separated, no header.

    Args:
        path (str): CSV file
        expected_n (int): Vertex count of the mesh the descriptors belong to

    Returns:
        DescriptorField: kind 'external'
    """
    try:
        frame = pd.read_csv(io.StringIO("".join(read_text_lines(path))), header=None)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read descriptor file {path}: {e}")
    if frame.shape[0] != expected_n:
        raise DimensionError(f"descriptor file {path} has {frame.shape[0]} rows, mesh has {expected_n} vertices")
    try:
        values = frame.apply(pd.to_numeric, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise DataError(f"descriptor file {path} contains a non-numeric token: {e}")
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"descriptor file {path} has a non-finite value at row {bad[0] + 1}, column {bad[1] + 1}")
    return DescriptorField(values, kind="external")


def save_descriptors(field, path):
    """Write a descriptor field as header-less CSV with round-trip precision."""
    with atomic_path(path) as tmp:
        pd.DataFrame(field.values).to_csv(tmp, header=False, index=False, float_format="%.17g")


def sample_points(n, count, seed=None, rng=None):
    """
    Uniformly random distinct vertex indices, sorted.

    Args:
        n (int): Number of vertices
        count (int): Number of indices to draw
        seed (int, optional): Seed for a fresh generator
        rng (np.random.Generator, optional): Generator to draw from instead

    Returns:
        np.ndarray: Sorted index set; all n indices when count >= n
    """
    if count >= n:
        if count > n:
            logger.warning(f"Requested {count} sample points from a shape with {n} vertices; using all")
        return np.arange(n)
    if rng is None:
        rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def sample_columns(d, fraction, rng):
    """Sorted random subset of ceil(fraction * d) descriptor columns."""
    count = min(d, max(1, math.ceil(fraction * d)))
    if count == d:
        return np.arange(d)
    return np.sort(rng.choice(d, size=count, replace=False))
