"""
Descriptor Network

A stack of fully connected residual layers applied to every point's
descriptor vector with shared weights:

    x <- x + ELU(x W_l + b_l),   l = 1..L

Width stays equal to the descriptor dimension throughout. Forward and
backward passes are written out explicitly so the network composes with the
hand-derived gradients of the functional-map solve and the penalties.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .utils.io_utils import atomic_path

logger = logging.getLogger("desc_net")

DEFAULT_NUM_LAYERS = 7
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class MLPParams:
    """Weights (d, d) and biases (d,) of each residual layer."""

    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError(f"{len(self.weights)} weight matrices but {len(self.biases)} bias vectors")
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[0] != W.shape[1] or b.shape != (W.shape[0],):
                raise DimensionError(f"layer shapes W {W.shape}, b {b.shape} are not (d, d), (d,)")
            if W.shape[0] != self.weights[0].shape[0]:
                raise DimensionError("all layers must share the descriptor dimension")

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def d(self):
        return self.weights[0].shape[0] if self.weights else 0

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.dtype(np.float64)

    def tensors(self):
        """Flat list [W_1, b_1, W_2, b_2, ...] sharing memory with the parameters."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    @classmethod
    def from_tensors(cls, tensors):
        return cls(weights=list(tensors[0::2]), biases=list(tensors[1::2]))

    def copy(self):
        return MLPParams.from_tensors([t.copy() for t in self.tensors()])

    def astype(self, dtype):
        return MLPParams.from_tensors([t.astype(dtype) for t in self.tensors()])

    def is_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_params(d, seed=0, num_layers=DEFAULT_NUM_LAYERS, dtype=np.float64):
    """
    Glorot-uniform weights and zero biases.

    Args:
        d (int): Descriptor dimension
        seed (int): Seed of the generator
        num_layers (int): Number of residual layers
        dtype: Floating point type of the parameters

    Returns:
        MLPParams: Fresh parameters
    """
    if d < 1:
        raise ParameterError(f"descriptor dimension must be >= 1, got {d}")
    if num_layers < 1:
        raise ParameterError(f"num_layers must be >= 1, got {num_layers}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (2 * d))
    weights = [rng.uniform(-bound, bound, size=(d, d)).astype(dtype) for _ in range(num_layers)]
    biases = [np.zeros(d, dtype=dtype) for _ in range(num_layers)]
    return MLPParams(weights, biases)


def zero_params(d, num_layers=DEFAULT_NUM_LAYERS, dtype=np.float64):
    """All-zero parameters; the network is then the identity."""
    return MLPParams([np.zeros((d, d), dtype=dtype) for _ in range(num_layers)],
                     [np.zeros(d, dtype=dtype) for _ in range(num_layers)])


def elu(z):
    return np.where(z >= 0, z, np.expm1(np.minimum(z, 0)))


def elu_grad(z):
    return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0))).astype(z.dtype)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    preactivations: List[np.ndarray]


def forward(params, X):
    """
    Apply the network row-wise.

    Args:
        params (MLPParams): Network parameters
        X (np.ndarray): (n, d) descriptor rows

    Returns:
        tuple: (Y (n, d), ForwardCache for ``backward``)
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise DimensionError(f"input of shape {X.shape} does not match network width {params.d}")
    X = X.astype(params.dtype, copy=False)
    inputs, pre = [], []
    for W, b in zip(params.weights, params.biases):
        Z = X @ W + b
        inputs.append(X)
        pre.append(Z)
        X = X + elu(Z)
    return X, ForwardCache(inputs, pre)


def backward(params, cache, grad_Y):
    """
    Reverse pass of ``forward``.

    Args:
        params (MLPParams): Parameters used in the forward call
        cache (ForwardCache): Cache returned by the forward call
        grad_Y (np.ndarray): (n, d) dLoss/dY

    Returns:
        tuple: (MLPParams of gradients, grad_X (n, d))
    """
    if len(cache.inputs) != params.num_layers:
        raise DimensionError(f"cache holds {len(cache.inputs)} layers, network has {params.num_layers}")
    if grad_Y.shape != cache.inputs[0].shape:
        raise DimensionError(f"gradient of shape {grad_Y.shape} does not match cached input {cache.inputs[0].shape}")

    grad_W = [None] * params.num_layers
    grad_b = [None] * params.num_layers
    G = grad_Y.astype(params.dtype, copy=False)
    for l in reversed(range(params.num_layers)):
        X, Z = cache.inputs[l], cache.preactivations[l]
        if X.shape[1] != params.d:
            raise DimensionError("stale cache: layer width differs from the parameters")
        GZ = G * elu_grad(Z)
        grad_W[l] = X.T @ GZ
        grad_b[l] = GZ.sum(axis=0)
        G = G + GZ @ params.weights[l].T
    return MLPParams(grad_W, grad_b), G


def save_checkpoint(params, path, config_hash="", extra=None):
    """
    Write parameters to a versioned .npz container.

    Args:
        params (MLPParams): Network parameters
        path (str): Destination file
        config_hash (str): Hash of the training configuration
        extra (dict, optional): JSON-serialisable metadata
    """
    arrays = {}
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    with atomic_path(path) as tmp:
        with open(tmp, 'wb') as fh:
            np.savez(fh, format_version=CHECKPOINT_FORMAT_VERSION, d=params.d, num_layers=params.num_layers,
                     config_hash=np.array(config_hash), metadata=np.array(json.dumps(extra or {})), **arrays)
    logger.info(f"Saved {params.num_layers}-layer d={params.d} checkpoint to {path}")


def load_checkpoint(path):
    """
    Read a checkpoint written by ``save_checkpoint``.

    Returns:
        tuple: (MLPParams, config_hash, metadata dict)
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise DataError(f"checkpoint {path} has unsupported format version {version}")
            num_layers = int(data["num_layers"])
            weights = [data[f"W{i}"] for i in range(num_layers)]
            biases = [data[f"b{i}"] for i in range(num_layers)]
            config_hash = str(data["config_hash"])
            metadata = json.loads(str(data["metadata"]))
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"cannot read checkpoint {path}: {e}")
    params = MLPParams(weights, biases)
    if not params.is_finite():
        raise DataError(f"checkpoint {path} contains non-finite parameters")
    return params, config_hash, metadata
