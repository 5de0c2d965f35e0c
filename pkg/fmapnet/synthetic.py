"""
Synthetic Shapes

Small meshes with known geometry and known correspondences: platonic
primitives, icospheres, grid sheets and near-isometric deformations of them
with ground-truth point maps.
"""

import logging

import numpy as np
import trimesh

from .errors import ParameterError
from .mesh_core import TriangleMesh
from .pointwise_map import PointMap

logger = logging.getLogger("synthetic")


def tetrahedron(name="tetrahedron"):
    """Regular tetrahedron on alternate corners of the cube [-1, 1]^3, faces oriented outwards."""
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(vertices, faces, name=name)


def equilateral_triangle(edge=1.0, name="triangle"):
    vertices = np.array([[0.0, 0.0, 0.0], [edge, 0.0, 0.0], [edge / 2, edge * np.sqrt(3) / 2, 0.0]])
    return TriangleMesh(vertices, np.array([[0, 1, 2]]), name=name)


def icosphere(subdivisions=4, radius=1.0, name="icosphere"):
    """
    Geodesic sphere from a subdivided icosahedron.

    Args:
        subdivisions (int): Subdivision levels (4 gives 2562 vertices)
        radius (float): Sphere radius
        name (str): Mesh identifier

    Returns:
        TriangleMesh: Closed genus-0 mesh
    """
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return TriangleMesh(np.asarray(sphere.vertices), np.asarray(sphere.faces), name=name)


def grid_sheet(nx=32, ny=32, width=2.0, height=2.0, bump=0.0, bump_center=(0.0, 0.0), bump_width=0.3,
               name="sheet"):
    """
    Rectangular sheet in the z = 0 plane, centred at the origin, optionally with a Gaussian bump.

    Cells are split along alternating diagonals.

    Args:
        nx, ny (int): Vertices along x and y (>= 2)
        width, height (float): Extent along x and y
        bump (float): Bump height
        bump_center (tuple): Bump position (x, y)
        bump_width (float): Bump standard deviation
        name (str): Mesh identifier

    Returns:
        TriangleMesh: nx * ny vertices, row-major in y then x
    """
    if nx < 2 or ny < 2:
        raise ParameterError(f"grid needs at least 2x2 vertices, got {nx}x{ny}")
    xs = np.linspace(-width / 2, width / 2, nx)
    ys = np.linspace(-height / 2, height / 2, ny)
    X, Y = np.meshgrid(xs, ys)
    Z = np.zeros_like(X)
    if bump:
        r2 = (X - bump_center[0]) ** 2 + (Y - bump_center[1]) ** 2
        Z = bump * np.exp(-r2 / (2 * bump_width ** 2))
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            if (i + j) % 2 == 0:
                faces.extend([[a, b, d], [a, d, c]])
            else:
                faces.extend([[a, b, c], [b, d, c]])
    return TriangleMesh(vertices, np.array(faces), name=name)


def bend_sheet(mesh, radius=1.0, name=None):
    """
    Roll a sheet around a cylinder of the given radius along x.

    Points of the z = 0 plane keep their pairwise geodesic distances; height
    offsets follow the surface normal, so bumps bend almost isometrically.
    """
    if radius <= 0:
        raise ParameterError(f"bend radius must be > 0, got {radius}")
    x, y, z = mesh.vertices.T
    angle = x / radius
    bent = np.column_stack([(radius + z) * np.sin(angle), y, radius - (radius + z) * np.cos(angle)])
    return TriangleMesh(bent, mesh.faces, name=name or f"{mesh.name}_bent")


def permute_vertices(mesh, perm, name=None):
    """
    Reorder vertices: new vertex i is old vertex perm[i]; faces are relabelled.

    Returns:
        TriangleMesh: The same surface with permuted vertex order
    """
    perm = np.asarray(perm, dtype=np.int64)
    if not np.array_equal(np.sort(perm), np.arange(mesh.n_vertices)):
        raise ParameterError("perm must be a permutation of the vertex indices")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return TriangleMesh(mesh.vertices[perm], inverse[mesh.faces], name=name or mesh.name)


def rigid_transform(mesh, rotation=None, translation=None, name=None):
    """Apply x -> R x + t to every vertex."""
    rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    return TriangleMesh(mesh.vertices @ rotation.T + translation, mesh.faces, name=name or mesh.name)


def random_rotation(seed=0):
    """Uniformly random proper rotation matrix."""
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def bumpy_sphere(subdivisions=3, amplitude=0.1, seed=0, name="bumpy_sphere"):
    """Icosphere with a smooth random radial displacement (no exact symmetries)."""
    sphere = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((4, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    v = sphere.vertices
    offset = np.sum(np.cos(2.0 * v @ directions.T + phases), axis=1) / 4.0
    return TriangleMesh(v * (1.0 + amplitude * offset)[:, None], sphere.faces, name=name)


def isometric_pair(nx=32, ny=32, seed=0, permute=True, bump=0.3, radius=1.0):
    """
    A bumpy sheet and its bent copy with a known correspondence.

    Args:
        nx, ny (int): Grid resolution of the template
        seed (int): Places the bump and draws the vertex permutation
        permute (bool): Shuffle the vertex order of the bent copy
        bump (float): Bump height
        radius (float): Bending radius

    Returns:
        tuple: (template, deformed, PointMap deformed -> template)
    """
    rng = np.random.default_rng(seed)
    center = tuple(rng.uniform(-0.4, 0.4, size=2))
    template = grid_sheet(nx, ny, bump=bump, bump_center=center, name="template")
    deformed = bend_sheet(template, radius=radius, name="deformed")
    correspondence = np.arange(template.n_vertices)
    if permute:
        correspondence = rng.permutation(template.n_vertices)
        deformed = permute_vertices(deformed, correspondence)
    logger.info(f"Built synthetic isometric pair with {template.n_vertices} vertices (seed {seed})")
    return template, deformed, PointMap(correspondence, source=template.name, target=deformed.name)
