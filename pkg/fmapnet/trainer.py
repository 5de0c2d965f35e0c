"""
Unsupervised Descriptor Training

Optimises the descriptor network so that functional maps estimated from its
output descriptors satisfy the structural penalties. One step, for every
shape pair in a batch:

    sample vertices -> network -> sampled projection -> C12, C21 solves
    -> penalties -> backward through all of the above

then averages the parameter gradients over the batch and applies ADAM.
"""

import time
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import TrainConfig
from .desc_net import MLPParams, init_params, forward, backward
from .descriptors import sample_points, sample_columns
from .errors import DimensionError, NumericalError, ParameterError
from .fmap_solver import solve_fmap, solve_fmap_backward, solve_fmap_regularized
from .penalties import total_energy, mult_operators, mult_operators_backward
from .spectral_basis import sampled_projector

logger = logging.getLogger("trainer")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SMOOTHING_WINDOW = 100
LOG_COLUMNS = ["step", "loss", "E1", "E2", "E3", "E4", "wall_ms", "geo_error"]


@dataclass
class ShapeData:
    """Everything training needs about one shape."""

    name: str
    basis: object
    descriptors: np.ndarray
    mesh: object = None

    @property
    def n(self):
        return self.descriptors.shape[0]

    @property
    def d(self):
        return self.descriptors.shape[1]


@dataclass
class AdamState:
    """First and second moment accumulators, one per parameter tensor."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        tensors = params.tensors()
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors], 0)


def adam_step(params, grads, state, lr):
    """
    One bias-corrected ADAM update.

    A step with any non-finite gradient entry is skipped: parameters and
    moments are returned untouched.

    Args:
        params (MLPParams): Current parameters
        grads (MLPParams): Gradients of the same shapes
        state (AdamState): Moment accumulators
        lr (float): Learning rate

    Returns:
        tuple: (new params, new state, applied flag)
    """
    p_tensors = params.tensors()
    g_tensors = grads.tensors()
    if len(p_tensors) != len(g_tensors) or any(p.shape != g.shape for p, g in zip(p_tensors, g_tensors)):
        raise DimensionError("gradient shapes do not match the parameters")
    if not grads.is_finite():
        logger.warning(f"Non-finite gradient at ADAM step {state.step + 1}; update skipped")
        return params, state, False

    step = state.step + 1
    correction1 = 1.0 - ADAM_BETA1 ** step
    correction2 = 1.0 - ADAM_BETA2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_tensors, g_tensors, state.m, state.v):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return MLPParams.from_tensors(new_p), AdamState(new_m, new_v, step), True


@dataclass
class PairEvaluation:
    """Loss, penalty components, maps and gradients of one shape pair."""

    loss: float
    components: tuple
    C12: np.ndarray
    C21: np.ndarray
    grads: Optional[MLPParams] = None


def spectral_descriptors(params, shape, dtype=np.float64):
    """Full-mesh coefficients Phi^T M T(D) of the network's output descriptors."""
    transformed, _ = forward(params.astype(dtype), shape.descriptors.astype(dtype))
    return shape.basis.pinv @ transformed


def evaluate_pair(params, shape1, shape2, idx1, idx2, cols, weights, compute_grad=True):
    """
    Loss of one pair for fixed vertex and descriptor subsets.

    Args:
        params (MLPParams): Network parameters (their dtype sets the arithmetic)
        shape1, shape2 (ShapeData): The pair
        idx1, idx2 (np.ndarray): Sampled vertices on each shape
        cols (np.ndarray): Descriptor columns used for E4
        weights (PenaltyWeights): Penalty weights
        compute_grad (bool): Also backpropagate to the parameters

    Returns:
        PairEvaluation: Loss, components, maps and optional gradients
    """
    dtype = params.dtype
    Y1, cache1 = forward(params, shape1.descriptors[idx1])
    Y2, cache2 = forward(params, shape2.descriptors[idx2])

    phi1, proj1 = sampled_projector(shape1.basis, idx1)
    phi2, proj2 = sampled_projector(shape2.basis, idx2)
    phi1, proj1, phi2, proj2 = (a.astype(dtype) for a in (phi1, proj1, phi2, proj2))

    A1 = proj1 @ Y1
    A2 = proj2 @ Y2
    C12 = solve_fmap(A1, A2, warn_underdetermined=False).astype(dtype)
    C21 = solve_fmap(A2, A1, warn_underdetermined=False).astype(dtype)

    ops1 = mult_operators(proj1, Y1[:, cols], phi1)
    ops2 = mult_operators(proj2, Y2[:, cols], phi2)
    evals1 = shape1.basis.eigenvalues.astype(dtype)
    evals2 = shape2.basis.eigenvalues.astype(dtype)
    terms = total_energy(C12, C21, evals1, evals2, ops1, ops2, weights)
    result = PairEvaluation(terms.value, terms.components, C12, C21)
    if not compute_grad:
        return result

    gA1_fwd, gA2_fwd = solve_fmap_backward(A1, A2, C12, terms.grad_C12)
    gA2_rev, gA1_rev = solve_fmap_backward(A2, A1, C21, terms.grad_C21)
    gY1 = proj1.T @ (gA1_fwd + gA1_rev).astype(dtype)
    gY2 = proj2.T @ (gA2_fwd + gA2_rev).astype(dtype)
    if terms.grad_ops1 is not None:
        gY1[:, cols] += mult_operators_backward(proj1, phi1, terms.grad_ops1)
        gY2[:, cols] += mult_operators_backward(proj2, phi2, terms.grad_ops2)

    grads1, _ = backward(params, cache1, gY1)
    grads2, _ = backward(params, cache2, gY2)
    result.grads = MLPParams.from_tensors([a + b for a, b in zip(grads1.tensors(), grads2.tensors())])
    return result


def _draw_subsets(shape1, shape2, config, rng):
    idx1 = sample_points(shape1.n, config.points_per_shape, rng=rng)
    idx2 = sample_points(shape2.n, config.points_per_shape, rng=rng)
    cols = sample_columns(shape1.d, config.e4_descriptor_fraction, rng)
    return idx1, idx2, cols


def _pair_loss_and_grads(params, shape1, shape2, config, seed):
    rng = np.random.default_rng(seed)
    weights = config.effective_weights
    try:
        idx1, idx2, cols = _draw_subsets(shape1, shape2, config, rng)
        return evaluate_pair(params, shape1, shape2, idx1, idx2, cols, weights)
    except NumericalError as e:
        logger.warning(f"Resampling pair ({shape1.name}, {shape2.name}) after: {e}")
    idx1, idx2, cols = _draw_subsets(shape1, shape2, config, rng)
    return evaluate_pair(params, shape1, shape2, idx1, idx2, cols, weights)


@dataclass
class StepResult:
    loss: float
    components: tuple
    params: MLPParams
    state: AdamState
    applied: bool
    pairs: List[PairEvaluation] = field(default_factory=list)


def training_step(batch, params, state, config, rng, parallel=None):
    """
    One optimisation step over a batch of shape pairs.

    Per-pair random seeds are drawn from ``rng`` before any work starts so the
    result does not depend on worker scheduling; gradients are reduced in
    batch order.

    Args:
        batch (Sequence[tuple]): (ShapeData, ShapeData) pairs
        params (MLPParams): Current network parameters
        state (AdamState): ADAM accumulators
        config (TrainConfig): Training settings
        rng (np.random.Generator): Source of the per-pair seeds
        parallel (joblib.Parallel, optional): Worker pool for the pairs

    Returns:
        StepResult: Batch-mean loss and components, updated params and state
    """
    if not batch:
        raise ParameterError("a training step needs at least one pair")
    for shape1, shape2 in batch:
        if shape1.d != shape2.d or shape1.d != params.d:
            raise DimensionError(f"descriptor widths of ({shape1.name}, {shape2.name}) do not match the network")
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(batch))
    jobs = [delayed(_pair_loss_and_grads)(params, s1, s2, config, int(seed))
            for (s1, s2), seed in zip(batch, seeds)]
    if parallel is None:
        evaluations = [fn(*args, **kwargs) for fn, args, kwargs in jobs]
    else:
        evaluations = parallel(jobs)

    scale = 1.0 / len(evaluations)
    grad_tensors = [np.zeros_like(t) for t in params.tensors()]
    for evaluation in evaluations:
        for acc, g in zip(grad_tensors, evaluation.grads.tensors()):
            acc += g
    grads = MLPParams.from_tensors([(g * scale).astype(params.dtype) for g in grad_tensors])
    loss = scale * sum(e.loss for e in evaluations)
    components = tuple(scale * sum(e.components[i] for e in evaluations) for i in range(4))

    new_params, new_state, applied = adam_step(params, grads, state, config.learning_rate)
    return StepResult(loss, components, new_params, new_state, applied, evaluations)


def all_pairs(n_shapes):
    """Every unordered pair of distinct shape indices."""
    return list(combinations(range(n_shapes), 2))


def smoothed(history, window=SMOOTHING_WINDOW):
    """Trailing moving average of a loss series."""
    return pd.Series(history, dtype=float).rolling(window, min_periods=1).mean().to_numpy()


def ablation_configs():
    """Named penalty subsets of the ablation study, in table order."""
    return OrderedDict([
        ("E1", ["E1"]),
        ("E2", ["E2"]),
        ("E3", ["E3"]),
        ("E4", ["E4"]),
        ("E1+E2", ["E1", "E2"]),
        ("E1+E2+E3", ["E1", "E2", "E3"]),
        ("E1+E2+E3+E4", ["E1", "E2", "E3", "E4"]),
    ])


def fmap_ours_opt(A1, A2, evals1, evals2, alpha):
    """Regularised functional map on coefficients of learned descriptors."""
    return solve_fmap_regularized(A1, A2, evals1, evals2, alpha)


@dataclass
class TrainResult:
    params: MLPParams
    log: pd.DataFrame
    state: AdamState

    @property
    def loss_history(self):
        return self.log["loss"].to_numpy()

    def penalty_history(self):
        return self.log[["E1", "E2", "E3", "E4"]]


class DescriptorTrainer:
    """
    Runs unsupervised training over a shape collection.

    Pairs are either drawn at random every step or cycled through in order
    (``config.pairing``); an explicit pair list restricts both modes.
    """

    def __init__(self, shapes: Sequence[ShapeData], config: TrainConfig, pairs=None,
                 monitor: Optional[Callable] = None, params: Optional[MLPParams] = None):
        """
        Initialize the trainer.

        Args:
            shapes (Sequence[ShapeData]): Shape collection, at least two shapes
            config (TrainConfig): Training settings
            pairs (list, optional): (i, j) index pairs or (name, name) pairs; all pairs by default
            monitor (callable, optional): ``monitor(step, params) -> dict`` run every
                ``config.eval_every`` steps; a ``geo_error`` entry is logged
            params (MLPParams, optional): Starting parameters; Glorot init by default
        """
        if len(shapes) < 2:
            raise ParameterError(f"training needs at least 2 shapes, got {len(shapes)}")
        widths = {s.d for s in shapes}
        if len(widths) != 1:
            raise DimensionError(f"shapes have differing descriptor widths {sorted(widths)}")
        self.shapes = list(shapes)
        self.config = config
        self.monitor = monitor
        self.pairs = self._resolve_pairs(pairs)
        self.dtype = np.dtype(config.dtype)
        self.rng = np.random.default_rng(config.seed)
        if params is None:
            params = init_params(widths.pop(), seed=config.seed, num_layers=config.num_layers, dtype=self.dtype)
        self.params = params.astype(self.dtype)
        self.state = AdamState.zeros_like(self.params)
        self.rows = []
        self._cursor = 0
        logger.info(f"Descriptor trainer initialized: {len(self.shapes)} shapes, {len(self.pairs)} pairs, "
                    f"d={self.params.d}, {self.params.num_layers} layers")

    def _resolve_pairs(self, pairs):
        if pairs is None:
            return all_pairs(len(self.shapes))
        index = {s.name: i for i, s in enumerate(self.shapes)}
        resolved = []
        for a, b in pairs:
            try:
                i = index[a] if isinstance(a, str) else int(a)
                j = index[b] if isinstance(b, str) else int(b)
            except KeyError as e:
                raise ParameterError(f"unknown shape in pair list: {e}")
            if not (0 <= i < len(self.shapes) and 0 <= j < len(self.shapes)):
                raise ParameterError(f"pair ({a}, {b}) is out of range")
            resolved.append((i, j))
        if not resolved:
            raise ParameterError("pair list is empty")
        return resolved

    def next_batch(self):
        """Shape pairs of the next step."""
        size = self.config.batch_pairs
        if self.config.pairing == "all":
            picks = [self.pairs[(self._cursor + i) % len(self.pairs)] for i in range(size)]
            self._cursor = (self._cursor + size) % len(self.pairs)
        else:
            picks = [self.pairs[i] for i in self.rng.integers(0, len(self.pairs), size=size)]
        return [(self.shapes[i], self.shapes[j]) for i, j in picks]

    def train(self, iterations=None):
        """
        Run the optimisation loop.

        Args:
            iterations (int, optional): Overrides ``config.iterations``

        Returns:
            TrainResult: Final parameters, per-step log and optimizer state
        """
        iterations = self.config.iterations if iterations is None else iterations
        logger.info(f"Training for {iterations} iterations: lr={self.config.learning_rate}, "
                    f"batch={self.config.batch_pairs}, points={self.config.points_per_shape}, "
                    f"weights={self.config.effective_weights.as_tuple()}")
        with Parallel(n_jobs=self.config.n_jobs, prefer="threads") as parallel:
            pool = parallel if self.config.n_jobs != 1 else None
            for _ in range(iterations):
                self.step(pool)
        return self.result()

    def step(self, parallel=None):
        step = len(self.rows)
        geo_error = np.nan
        eval_every = self.config.eval_every
        if self.monitor is not None and eval_every and step % eval_every == 0:
            geo_error = self.monitor(step, self.params).get("geo_error", np.nan)

        started = time.perf_counter()
        result = training_step(self.next_batch(), self.params, self.state, self.config, self.rng, parallel)
        wall_ms = (time.perf_counter() - started) * 1000.0
        self.params, self.state = result.params, result.state
        self.rows.append([step, result.loss, *result.components, wall_ms, geo_error])

        if self.config.log_every and (step + 1) % self.config.log_every == 0:
            e1, e2, e3, e4 = result.components
            logger.info(f"Step {step + 1}: loss={result.loss:.6g} E1={e1:.4g} E2={e2:.4g} "
                        f"E3={e3:.4g} E4={e4:.4g} ({wall_ms:.0f} ms)")
        return result

    def result(self):
        log = pd.DataFrame(self.rows, columns=LOG_COLUMNS)
        log["step"] = log["step"].astype(int)
        return TrainResult(self.params, log, self.state)


def train(shapes, config, pairs=None, monitor=None, params=None):
    """
    Train a descriptor network on a shape collection.

    Args:
        shapes (Sequence[ShapeData]): At least two shapes with equal descriptor width
        config (TrainConfig): Training settings
        pairs (list, optional): Restrict training to these pairs
        monitor (callable, optional): Periodic evaluation callback
        params (MLPParams, optional): Starting parameters

    Returns:
        TrainResult: Parameters, training log (step, loss, E1..E4, wall_ms, geo_error), ADAM state
    """
    return DescriptorTrainer(shapes, config, pairs=pairs, monitor=monitor, params=params).train()
