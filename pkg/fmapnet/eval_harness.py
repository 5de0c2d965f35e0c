"""
Correspondence Evaluation

Geodesic-error protocol for pointwise maps: per-vertex geodesic distance
between the computed and ground-truth images, normalised by the square root
of the source surface area, summarised by mean / 95th percentile / max and a
cumulative error curve. Geodesics are shortest paths on the edge graph.
"""

import json
import math
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from scipy.sparse import csgraph

from .errors import DataError, DimensionError
from .mesh_core import edge_graph, total_area
from .utils.io_utils import atomic_path, atomic_write

logger = logging.getLogger("eval_harness")

CURVE_MAX = 0.25
CURVE_STEP = 0.0025
DIJKSTRA_CHUNK = 256


def geodesic_distances_from(mesh, sources, n_jobs=1, graph=None):
    """
    Graph-geodesic distances from a set of source vertices.

    Args:
        mesh (TriangleMesh): Input mesh
        sources (array-like): Source vertex indices
        n_jobs (int): joblib workers over source chunks
        graph (scipy.sparse.csr_matrix, optional): Precomputed edge graph

    Returns:
        np.ndarray: (len(sources), n) distances; unreachable vertices are +inf
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.size and (sources.min() < 0 or sources.max() >= mesh.n_vertices):
        raise DataError(f"source indices out of range for mesh '{mesh.name}' with {mesh.n_vertices} vertices")
    if graph is None:
        graph = edge_graph(mesh)
    chunks = [sources[i:i + DIJKSTRA_CHUNK] for i in range(0, sources.size, DIJKSTRA_CHUNK)]
    if not chunks:
        return np.zeros((0, mesh.n_vertices))
    rows = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(csgraph.dijkstra)(graph, directed=False, indices=chunk) for chunk in chunks)
    distances = np.vstack(rows)
    unreachable = int(np.sum(~np.isfinite(distances)))
    if unreachable:
        logger.warning(f"{unreachable} vertex pairs of '{mesh.name}' are unreachable (disconnected mesh)")
    return distances


@dataclass
class ErrorReport:
    """Normalised geodesic errors of one map against ground truth."""

    errors: np.ndarray
    mean: float
    percentile95: float
    max: float
    curve: pd.DataFrame

    def to_dict(self):
        return {
            "n": int(self.errors.size),
            "mean": self.mean,
            "percentile95": self.percentile95,
            "max": self.max,
            "unreachable": int(np.sum(~np.isfinite(self.errors))),
            "geodesics": "edge-graph shortest paths",
        }


def nearest_rank_percentile(values, q):
    """q-th percentile by the nearest-rank definition (no interpolation)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot take a percentile of an empty error set")
    return float(np.percentile(values, q, method="inverted_cdf"))


def error_curve(errors, max_threshold=CURVE_MAX, step=CURVE_STEP):
    """
    Fraction of vertices with error <= threshold on a fixed grid.

    When the largest finite error lies beyond the grid, a terminal row at
    that error is appended.
    """
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.linspace(0.0, max_threshold, int(round(max_threshold / step)) + 1)
    finite = errors[np.isfinite(errors)]
    if finite.size and finite.max() > thresholds[-1]:
        thresholds = np.append(thresholds, finite.max())
    ordered = np.sort(errors)
    fractions = np.searchsorted(ordered, thresholds, side="right") / max(errors.size, 1)
    return pd.DataFrame({"threshold": thresholds, "fraction": fractions})


def geodesic_error(point_map, ground_truth, source_mesh, n_jobs=1):
    """
    Normalised geodesic error of a point map.

    Args:
        point_map (PointMap): Computed map T: target -> source
        ground_truth (PointMap): Ground-truth map of the same length
        source_mesh (TriangleMesh): Mesh the map entries index into
        n_jobs (int): Dijkstra workers

    Returns:
        ErrorReport: Per-vertex errors with summary statistics and curve
    """
    if len(point_map) != len(ground_truth):
        raise DimensionError(f"map has {len(point_map)} entries, ground truth has {len(ground_truth)}")
    if len(point_map) == 0:
        raise DataError("cannot evaluate an empty point map")
    point_map.validate(source_mesh.n_vertices)
    ground_truth.validate(source_mesh.n_vertices)

    computed = point_map.target_to_source
    truth = ground_truth.target_to_source
    sources, row_of = np.unique(truth, return_inverse=True)
    graph = edge_graph(source_mesh)
    errors = np.empty(len(truth))
    for start in range(0, sources.size, DIJKSTRA_CHUNK * max(n_jobs, 1)):
        block = sources[start:start + DIJKSTRA_CHUNK * max(n_jobs, 1)]
        distances = geodesic_distances_from(source_mesh, block, n_jobs=n_jobs, graph=graph)
        members = np.nonzero((row_of >= start) & (row_of < start + block.size))[0]
        errors[members] = distances[row_of[members] - start, computed[members]]

    errors /= math.sqrt(total_area(source_mesh))
    report = ErrorReport(
        errors=errors,
        mean=float(np.mean(errors)),
        percentile95=nearest_rank_percentile(errors, 95),
        max=float(np.max(errors)),
        curve=error_curve(errors),
    )
    logger.info(f"Geodesic error over {errors.size} vertices: mean={report.mean:.6g}, "
                f"p95={report.percentile95:.6g}, max={report.max:.6g}")
    return report


def correlation(loss_history, error_history):
    """
    Pearson correlation between two equally long series.

    Args:
        loss_history (array-like): Loss values
        error_history (array-like): Error values at the same steps

    Returns:
        float: Coefficient in [-1, 1]
    """
    x = np.asarray(loss_history, dtype=np.float64)
    y = np.asarray(error_history, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"series shapes differ: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise DataError(f"correlation needs at least 3 samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("correlation series contain non-finite values")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("correlation is undefined for a constant series")
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


def save_report(report, json_path, curve_path=None, extra=None):
    """
    Write the statistics as JSON and the cumulative curve as CSV.

    Args:
        report (ErrorReport): Evaluation result
        json_path (str): Statistics file
        curve_path (str, optional): Curve CSV (threshold, fraction)
        extra (dict, optional): Additional keys for the JSON file
    """
    payload = report.to_dict()
    payload.update(extra or {})
    with atomic_write(json_path) as fh:
        json.dump(payload, fh, indent=2)
    if curve_path:
        with atomic_path(curve_path) as tmp:
            report.curve.to_csv(tmp, index=False, float_format="%.10g")
    logger.info(f"Saved evaluation report to {json_path}")
