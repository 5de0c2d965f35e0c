"""
fmapnet: unsupervised learning of shape descriptors for functional-map correspondence.
"""

from .errors import FmapError, ParameterError, DataError, NumericalError
from .mesh_core import TriangleMesh, load_mesh, save_mesh
from .spectral_basis import LaplaceBasis, compute_basis, compute_full_basis
from .fmap_solver import FunctionalMap, solve_fmap, solve_fmap_regularized
from .pointwise_map import PointMap, fmap_to_p2p, icp_refine, p2p_to_fmap
from .trainer import ShapeData, DescriptorTrainer, train
from .matching import match_pair

__version__ = "0.1"
