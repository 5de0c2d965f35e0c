"""
Configuration objects for the correspondence pipeline.

Defaults are the standard settings of unsupervised descriptor training.
A run starts from these defaults, merges a JSON config file, then
environment variables (a ``.env`` file is honoured), then explicit CLI flags.
"""

import os
import math
import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict, fields, replace
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .errors import ParameterError

logger = logging.getLogger("config")

PENALTY_NAMES = ("E1", "E2", "E3", "E4")


@dataclass(frozen=True)
class PenaltyWeights:
    """Scalar weights of the four structural penalties."""

    w1: float = 1e3
    w2: float = 1e3
    w3: float = 1.0
    w4: float = 1e5

    def __post_init__(self):
        for name, value in zip(PENALTY_NAMES, self.as_tuple()):
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"penalty weight for {name} must be finite and >= 0, got {value}")

    def as_tuple(self):
        return (self.w1, self.w2, self.w3, self.w4)

    def restricted(self, active: Sequence[str]):
        """
        Zero the weights of penalties not listed in ``active``.

        Args:
            active (Sequence[str]): Penalty names, subset of E1..E4

        Returns:
            PenaltyWeights: Masked copy
        """
        active = {name.strip().upper() for name in active}
        unknown = active - set(PENALTY_NAMES)
        if unknown:
            raise ParameterError(f"unknown penalties: {sorted(unknown)}")
        values = [w if name in active else 0.0 for name, w in zip(PENALTY_NAMES, self.as_tuple())]
        return PenaltyWeights(*values)


@dataclass
class TrainConfig:
    """Settings of the unsupervised training loop."""

    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    learning_rate: float = 0.001
    batch_pairs: int = 10
    iterations: int = 10000
    points_per_shape: int = 1500
    e4_descriptor_fraction: float = 0.2
    k: int = 120
    seed: int = 0
    dtype: str = "float32"
    num_layers: int = 7
    log_every: int = 100
    eval_every: int = 0
    n_jobs: int = 1
    pairing: str = "random"
    active_penalties: List[str] = field(default_factory=lambda: list(PENALTY_NAMES))

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.e4_descriptor_fraction <= 1:
            raise ParameterError(
                f"e4_descriptor_fraction must be in (0, 1], got {self.e4_descriptor_fraction}")
        if self.batch_pairs < 1:
            raise ParameterError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.points_per_shape < 1:
            raise ParameterError(f"points_per_shape must be >= 1, got {self.points_per_shape}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.num_layers < 1:
            raise ParameterError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.pairing not in ("random", "all"):
            raise ParameterError(f"pairing must be 'random' or 'all', got {self.pairing}")
        # raises on unknown names
        self.weights.restricted(self.active_penalties)

    @property
    def effective_weights(self):
        return self.weights.restricted(self.active_penalties)

    def to_dict(self):
        data = asdict(self)
        data["weights"] = asdict(self.weights)
        return data

    def config_hash(self):
        """SHA-256 of the canonical JSON form; stored alongside checkpoints."""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class DescriptorConfig:
    """Which raw descriptors feed the pipeline."""

    kind: str = "shot"
    shot_radius: Optional[float] = None
    shot_radius_fraction: float = 0.05
    hks_times: int = 16
    descriptor_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("shot", "hks", "file"):
            raise ParameterError(f"descriptor kind must be shot, hks or file, got {self.kind}")
        if self.shot_radius is not None and self.shot_radius <= 0:
            raise ParameterError(f"shot radius must be > 0, got {self.shot_radius}")
        if self.hks_times < 1:
            raise ParameterError(f"hks_times must be >= 1, got {self.hks_times}")

    def settings_key(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PipelineConfig:
    """Everything a CLI command needs: shapes, basis size, descriptors, training, output."""

    shapes: List[str] = field(default_factory=list)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "fmapnet_out"
    seed: int = 0
    threads: int = 1
    alpha: float = 1e-3
    icp_max_iters: int = 30
    auto_precompute: bool = True

    @property
    def k(self):
        return self.train.k

    @property
    def cache_dir(self):
        return os.path.join(self.out_dir, "cache")

    def to_dict(self):
        data = asdict(self)
        data["train"] = self.train.to_dict()
        return data

    @classmethod
    def load(cls, path=None, overrides: Optional[Dict] = None, env=True):
        """
        Build a configuration from defaults, a JSON file, the environment and overrides.

        Args:
            path (str, optional): JSON config file
            overrides (dict, optional): Flat keys (``k``, ``seed``, ``train.iterations``,
                ``weights.w4``, ``descriptor.kind`` ...) applied last
            env (bool): Whether to read FMAPNET_* environment variables

        Returns:
            PipelineConfig: Validated configuration
        """
        raw = {}
        if path:
            if not os.path.exists(path):
                raise ParameterError(f"config file not found: {path}")
            try:
                with open(path, 'r') as f:
                    raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ParameterError(f"config file {path} is not valid JSON: {e}")
            logger.info(f"Configuration loaded from {path}")

        flat = _flatten(raw)
        if env:
            load_dotenv()
            for key, env_name, cast in _ENV_KEYS:
                value = os.getenv(env_name)
                if value not in (None, ""):
                    flat[key] = cast(value)
        for key, value in (overrides or {}).items():
            if value is not None:
                flat[key] = value
        return cls._from_flat(flat)

    @classmethod
    def _from_flat(cls, flat):
        top, train, weights, descriptor = {}, {}, {}, {}
        train_names = {f.name for f in fields(TrainConfig)} - {"weights"}
        for key, value in flat.items():
            section, _, name = key.rpartition(".")
            if section == "" and name == "k":
                train["k"] = value
            elif section == "":
                if name not in {f.name for f in fields(cls)} - {"descriptor", "train"}:
                    raise ParameterError(f"unknown config key: {key}")
                top[name] = value
            elif section in ("weights", "train.weights"):
                if name not in {f.name for f in fields(PenaltyWeights)}:
                    raise ParameterError(f"unknown config key: {key}")
                weights[name] = float(value)
            elif section == "train":
                if name not in train_names:
                    raise ParameterError(f"unknown config key: {key}")
                train[name] = value
            elif section == "descriptor":
                if name not in {f.name for f in fields(DescriptorConfig)}:
                    raise ParameterError(f"unknown config key: {key}")
                descriptor[name] = value
            else:
                raise ParameterError(f"unknown config key: {key}")
        if "seed" in top and "seed" not in train:
            train["seed"] = top["seed"]
        if "threads" in top and "n_jobs" not in train:
            train["n_jobs"] = top["threads"]
        try:
            train_cfg = TrainConfig(weights=PenaltyWeights(**weights), **train)
            descriptor_cfg = DescriptorConfig(**descriptor)
            return cls(descriptor=descriptor_cfg, train=train_cfg, **top)
        except TypeError as e:
            raise ParameterError(f"invalid configuration: {e}")

    def with_train(self, **changes):
        """Copy with some TrainConfig fields replaced."""
        return replace(self, train=replace(self.train, **changes))


_ENV_KEYS = [
    ("out_dir", "FMAPNET_OUT_DIR", str),
    ("threads", "FMAPNET_THREADS", int),
    ("seed", "FMAPNET_SEED", int),
    ("k", "FMAPNET_K", int),
]


def _flatten(raw, prefix=""):
    flat = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat
