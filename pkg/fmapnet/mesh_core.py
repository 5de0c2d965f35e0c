"""
Triangle Mesh Core

This module loads, validates and saves triangle meshes (OFF and OBJ) and
provides the geometric primitives the rest of the pipeline is built on:
face and vertex areas, normals, and the weighted edge graph.
"""

import os
import math
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import MeshParseError, DegenerateFaceError, DataError
from .utils.io_utils import atomic_write, array_hash, read_text_lines

logger = logging.getLogger("mesh_core")

# Faces with area below this fraction of the squared bounding-box diagonal are rejected.
DEGENERATE_AREA_FRACTION = 1e-12


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """
    Vertex positions and 0-based triangle indices of one shape.

    Arrays are made read-only on construction, so a mesh can be shared
    between workers without copying.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise DataError(f"vertices must be an (n, 3) array, got shape {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DataError(f"faces must be an (m, 3) array, got shape {faces.shape}")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        validate_mesh(self)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def bounding_box_diagonal(self):
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def content_hash(self):
        """Digest of geometry and connectivity; keys the basis and descriptor caches."""
        return array_hash(self.vertices, self.faces)

    def __repr__(self):
        return f"TriangleMesh(name={self.name!r}, n={self.n_vertices}, m={self.n_faces})"


def validate_mesh(mesh):
    """
    Check index ranges and reject degenerate faces; warn on non-manifold edges.

    Args:
        mesh (TriangleMesh): Mesh to check

    Raises:
        DataError: non-finite vertex or face index out of range
        DegenerateFaceError: repeated index or near-zero area
    """
    n = mesh.n_vertices
    faces = mesh.faces
    non_finite = np.where(~np.all(np.isfinite(mesh.vertices), axis=1))[0]
    if non_finite.size:
        v = int(non_finite[0])
        raise DataError(f"vertex {v} of mesh '{mesh.name}' has non-finite coordinates: {mesh.vertices[v].tolist()}")
    if faces.size == 0:
        return
    bad = np.where((faces < 0) | (faces >= n))[0]
    if bad.size:
        f = int(bad[0])
        raise DataError(
            f"face {f} of mesh '{mesh.name}' references vertex outside [0, {n - 1}]: {faces[f].tolist()}")

    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    threshold = DEGENERATE_AREA_FRACTION * mesh.bounding_box_diagonal ** 2
    tiny = face_areas(mesh) <= threshold
    degenerate = np.where(repeated | tiny)[0]
    if degenerate.size:
        logger.error(f"Mesh '{mesh.name}' has {degenerate.size} degenerate faces")
        raise DegenerateFaceError(degenerate.tolist(), name=mesh.name)

    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        logger.warning(
            f"Mesh '{mesh.name}' is non-manifold: {int(np.sum(counts > 2))} edges shared by more than two faces")


def load_mesh(path, fmt=None, name=None):
    """
    Load a triangle mesh from an OFF or OBJ file.

    Polygons with more than three corners are split into a triangle fan.
    OBJ normals, texture coordinates and other records are ignored.

    Args:
        path (str): File to read
        fmt (str, optional): 'off' or 'obj'; inferred from the extension when omitted
        name (str, optional): Mesh identifier; defaults to the file stem

    Returns:
        TriangleMesh: Validated mesh, vertex order preserved from the file
    """
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    fmt = fmt.lower()
    if name is None:
        name = os.path.splitext(os.path.basename(path))[0]
    if not os.path.exists(path):
        raise DataError(f"mesh file not found: {path}")

    try:
        lines = read_text_lines(path, MeshParseError)
    except OSError as e:
        raise DataError(f"cannot read mesh file {path}: {e}")

    if fmt == "off":
        vertices, faces, face_lines = _parse_off(lines, path)
    elif fmt == "obj":
        vertices, faces, face_lines = _parse_obj(lines, path)
    else:
        raise DataError(f"unsupported mesh format '{fmt}' for {path} (expected OFF or OBJ)")

    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = vertices.shape[0]
    out_of_range = np.where((faces < 0) | (faces >= n))[0]
    if out_of_range.size:
        f = int(out_of_range[0])
        raise MeshParseError(
            f"face index out of range (mesh has {n} vertices): {faces[f].tolist()}",
            path=path, line_number=face_lines[f])

    mesh = TriangleMesh(vertices, faces, name=name)
    logger.info(f"Loaded mesh '{name}' from {path}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return mesh


def _content_lines(lines):
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line


def _to_floats(tokens, path, number):
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise MeshParseError(f"malformed number in {' '.join(tokens)!r}", path=path, line_number=number)
    if not all(math.isfinite(v) for v in values):
        raise MeshParseError(f"non-finite coordinate in {' '.join(tokens)!r}", path=path, line_number=number)
    return values


def _to_ints(tokens, path, number):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MeshParseError(f"malformed index in {' '.join(tokens)!r}", path=path, line_number=number)


def _fan(polygon):
    return [[polygon[0], polygon[i], polygon[i + 1]] for i in range(1, len(polygon) - 1)]


def _parse_off(lines, path):
    content = _content_lines(lines)
    try:
        number, header = next(content)
    except StopIteration:
        raise MeshParseError("empty file", path=path)
    tokens = header.split()
    if tokens[0].upper() != "OFF":
        raise MeshParseError(f"expected 'OFF' header, got {tokens[0]!r}", path=path, line_number=number)
    counts = tokens[1:]
    if not counts:
        try:
            number, line = next(content)
        except StopIteration:
            raise MeshParseError("missing counts line", path=path)
        counts = line.split()
    if len(counts) < 2:
        raise MeshParseError("counts line needs vertex and face counts", path=path, line_number=number)
    n_vertices, n_faces = _to_ints(counts[:2], path, number)

    vertices = []
    for _ in range(n_vertices):
        try:
            number, line = next(content)
        except StopIteration:
            raise MeshParseError(f"expected {n_vertices} vertices, file ended early", path=path)
        values = _to_floats(line.split(), path, number)
        if len(values) < 3:
            raise MeshParseError("vertex line needs three coordinates", path=path, line_number=number)
        vertices.append(values[:3])

    faces, face_lines = [], []
    for _ in range(n_faces):
        try:
            number, line = next(content)
        except StopIteration:
            raise MeshParseError(f"expected {n_faces} faces, file ended early", path=path)
        values = _to_ints(line.split(), path, number)
        count = values[0]
        if count < 3 or len(values) < count + 1:
            raise MeshParseError(f"face line declares {count} corners", path=path, line_number=number)
        for tri in _fan(values[1:count + 1]):
            faces.append(tri)
            face_lines.append(number)
    return vertices, faces, face_lines


def _obj_index(token, n_vertices, path, number):
    head = token.split("/", 1)[0]
    try:
        index = int(head)
    except ValueError:
        raise MeshParseError(f"malformed face index {token!r}", path=path, line_number=number)
    if index < 0:
        return n_vertices + index
    if index == 0:
        raise MeshParseError("OBJ indices are 1-based; found 0", path=path, line_number=number)
    return index - 1


def _parse_obj(lines, path):
    vertices, faces, face_lines = [], [], []
    for number, line in _content_lines(lines):
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            values = _to_floats(tokens[1:], path, number)
            if len(values) < 3:
                raise MeshParseError("vertex record needs three coordinates", path=path, line_number=number)
            vertices.append(values[:3])
        elif tag == "f":
            polygon = [_obj_index(t, len(vertices), path, number) for t in tokens[1:]]
            if len(polygon) < 3:
                raise MeshParseError("face record needs at least three corners", path=path, line_number=number)
            for tri in _fan(polygon):
                faces.append(tri)
                face_lines.append(number)
    return vertices, faces, face_lines


def save_mesh(mesh, path, fmt=None):
    """
    Write a mesh as OFF or OBJ with shortest round-trip float formatting.

    Args:
        mesh (TriangleMesh): Mesh to write
        path (str): Destination
        fmt (str, optional): 'off' or 'obj'; inferred from the extension when omitted
    """
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    fmt = fmt.lower()
    if fmt not in ("off", "obj"):
        raise DataError(f"unsupported mesh format '{fmt}' for {path}")

    with atomic_write(path) as fh:
        if fmt == "off":
            fh.write("OFF\n")
            fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
            for i, j, k in mesh.faces.tolist():
                fh.write(f"3 {i} {j} {k}\n")
        else:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for i, j, k in (mesh.faces + 1).tolist():
                fh.write(f"f {i} {j} {k}\n")
    logger.info(f"Saved mesh '{mesh.name}' to {path}")


def face_normals_unscaled(mesh):
    """Cross products of the two edges leaving corner 0; norm = twice the face area."""
    v = mesh.vertices
    f = mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def face_areas(mesh):
    return 0.5 * np.linalg.norm(face_normals_unscaled(mesh), axis=1)


def total_area(mesh):
    return float(face_areas(mesh).sum())


def vertex_areas(mesh):
    """
    Lumped (barycentric) vertex areas: one third of the area of every incident face.

    Args:
        mesh (TriangleMesh): Input mesh

    Returns:
        np.ndarray: (n,) areas whose sum equals the total surface area
    """
    third = face_areas(mesh) / 3.0
    areas = np.zeros(mesh.n_vertices)
    for corner in range(3):
        areas += np.bincount(mesh.faces[:, corner], weights=third, minlength=mesh.n_vertices)
    return areas


def vertex_normals(mesh):
    """Area-weighted vertex normals, unit length. Isolated vertices get a zero normal."""
    fn = face_normals_unscaled(mesh)
    normals = np.zeros((mesh.n_vertices, 3))
    for corner in range(3):
        for axis in range(3):
            normals[:, axis] += np.bincount(mesh.faces[:, corner], weights=fn[:, axis],
                                            minlength=mesh.n_vertices)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)


def unique_edges(mesh):
    """Sorted (E, 2) array of undirected edges, each listed once."""
    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(edges, axis=0)


def edge_graph(mesh):
    """
    Undirected adjacency weighted by Euclidean edge length.

    Args:
        mesh (TriangleMesh): Input mesh

    Returns:
        scipy.sparse.csr_matrix: Symmetric (n, n) matrix; one stored entry per direction
        of every unique mesh edge
    """
    edges = unique_edges(mesh)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    n = mesh.n_vertices
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((np.concatenate([lengths, lengths]), (rows, cols)), shape=(n, n))


def shortest_edge_per_vertex(mesh):
    """Length of the shortest incident edge of every vertex (inf for isolated vertices)."""
    edges = unique_edges(mesh)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    shortest = np.full(mesh.n_vertices, np.inf)
    np.minimum.at(shortest, edges[:, 0], lengths)
    np.minimum.at(shortest, edges[:, 1], lengths)
    return shortest
