"""Experiment manifests: flat ``dotted.key=value`` files read with python-dotenv.

Precedence, lowest first: built-in defaults, AUTOOPT_* environment variables,
the manifest file, then command-line overrides.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from dotenv import dotenv_values

import constants
from autoopt_controller import ControllerConfig
from core_math import dtype_for
from errors import ConfigError
from optimizers import OptimizerSpec


@dataclass
class DataConfig:
    dataset: str = constants.DATASET_MNIST
    dir: str = "data"
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    standardize: bool = True


@dataclass
class ModelConfig:
    arch: Optional[str] = None  # None: the dataset's default architecture
    dropout: float = 0.5
    merge_bias: bool = False


@dataclass
class OptimizerConfig:
    kind: str = constants.OPT_SGD
    beta2: float = constants.DEFAULT_ADAM_BETA2
    eps: float = constants.DEFAULT_EPS

    def spec(self) -> OptimizerSpec:
        try:
            return OptimizerSpec(self.kind, self.beta2, self.eps)
        except ValueError as e:
            raise ConfigError(str(e))


@dataclass
class ControllerSection:
    """Manifest view of the controller; unset fields fall back to per-optimizer defaults."""

    upsilon: Optional[float] = None
    ridge: Optional[float] = None
    alpha_min: Optional[float] = None
    alpha_max: Optional[float] = None
    beta_max: Optional[float] = None
    adagrad_mode: Optional[str] = None
    init_alpha: Optional[float] = None
    warmup_steps: Optional[int] = None
    min_rel_det: Optional[float] = None

    def build(self, kind: str) -> ControllerConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return ControllerConfig.for_optimizer(kind, **values)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    seeds: List[int] = field(default_factory=lambda: [0])
    precision: str = constants.PRECISION_F64
    eval_every: int = 0  # steps between extra metric rows; 0 = end of epoch only
    divergence_factor: float = constants.DIVERGENCE_FACTOR


@dataclass
class GridConfig:
    alphas: List[float] = field(default_factory=lambda: list(constants.GRID_LEARNING_RATES))
    betas: List[float] = field(default_factory=lambda: list(constants.GRID_MOMENTA))


@dataclass
class TestbedConfig:
    dim: int = 5
    batch_size: int = 16
    noise: float = 1.0
    steps: int = 200
    grid_step: float = constants.TESTBED_GRID_STEP
    draws: int = constants.TESTBED_DRAWS
    seed: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    controller: ControllerSection = field(default_factory=ControllerSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    testbed: TestbedConfig = field(default_factory=TestbedConfig)
    mode: str = constants.MODE_AUTO
    fixed_alpha: float = 0.01
    fixed_beta: float = 0.0
    out_dir: str = "output"

    def optimizer_spec(self) -> OptimizerSpec:
        return self.optimizer.spec()

    def controller_config(self) -> ControllerConfig:
        try:
            return self.controller.build(self.optimizer.kind)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"Invalid controller settings: {e}")

    def validate(self) -> "ExperimentConfig":
        if self.mode not in (constants.MODE_AUTO, constants.MODE_FIXED):
            raise ConfigError(f"mode must be 'auto' or 'fixed', got '{self.mode}'")
        if self.data.dataset not in (constants.DATASET_MNIST, constants.DATASET_CIFAR10):
            raise ConfigError(f"Unknown dataset '{self.data.dataset}'")
        if not self.train.seeds:
            raise ConfigError("At least one seed is required")
        if self.train.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.train.epochs}")
        min_batch = 2 if self.mode == constants.MODE_AUTO else 1
        if self.train.batch_size < min_batch:
            raise ConfigError(f"batch_size must be >= {min_batch} in {self.mode} mode")
        try:
            dtype_for(self.train.precision)
        except ValueError as e:
            raise ConfigError(str(e))
        if self.fixed_alpha <= 0:
            raise ConfigError(f"fixed.alpha must be > 0, got {self.fixed_alpha}")
        if not 0.0 <= self.fixed_beta < 1.0:
            raise ConfigError(f"fixed.beta must be in [0, 1), got {self.fixed_beta}")
        if not self.grid.alphas or not self.grid.betas:
            raise ConfigError("Grid lists must be nonempty")
        self.optimizer_spec()
        self.controller_config()
        return self


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "all") else int(text)


def _list(item: Callable[[str], Any]) -> Callable[[str], list]:
    return lambda text: [item(part) for part in text.replace(";", ",").split(",") if part.strip()]


# dotted key -> (section attribute or None for top level, field name, parser)
KEYS: Dict[str, Tuple[Optional[str], str, Callable[[str], Any]]] = {
    "data.dataset": ("data", "dataset", str),
    "data.dir": ("data", "dir", str),
    "data.train_subset": ("data", "train_subset", _optional_int),
    "data.test_subset": ("data", "test_subset", _optional_int),
    "data.standardize": ("data", "standardize", _bool),
    "model.arch": ("model", "arch", str),
    "model.dropout": ("model", "dropout", float),
    "model.merge_bias": ("model", "merge_bias", _bool),
    "optimizer.kind": ("optimizer", "kind", str),
    "optimizer.beta2": ("optimizer", "beta2", float),
    "optimizer.eps": ("optimizer", "eps", float),
    "mode": (None, "mode", str),
    "fixed.alpha": (None, "fixed_alpha", float),
    "fixed.beta": (None, "fixed_beta", float),
    "controller.upsilon": ("controller", "upsilon", float),
    "controller.ridge": ("controller", "ridge", float),
    "controller.alpha_min": ("controller", "alpha_min", float),
    "controller.alpha_max": ("controller", "alpha_max", float),
    "controller.beta_max": ("controller", "beta_max", float),
    "controller.adagrad_mode": ("controller", "adagrad_mode", str),
    "controller.init_alpha": ("controller", "init_alpha", float),
    "controller.warmup_steps": ("controller", "warmup_steps", int),
    "controller.min_rel_det": ("controller", "min_rel_det", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.seeds": ("train", "seeds", _list(int)),
    "train.precision": ("train", "precision", str),
    "train.eval_every": ("train", "eval_every", int),
    "train.divergence_factor": ("train", "divergence_factor", float),
    "out.dir": (None, "out_dir", str),
    "grid.alphas": ("grid", "alphas", _list(float)),
    "grid.betas": ("grid", "betas", _list(float)),
    "testbed.dim": ("testbed", "dim", int),
    "testbed.batch_size": ("testbed", "batch_size", int),
    "testbed.noise": ("testbed", "noise", float),
    "testbed.steps": ("testbed", "steps", int),
    "testbed.grid_step": ("testbed", "grid_step", float),
    "testbed.draws": ("testbed", "draws", int),
    "testbed.seed": ("testbed", "seed", int),
}

ENV_KEYS = {
    "AUTOOPT_DATA_DIR": "data.dir",
    "AUTOOPT_OUT_DIR": "out.dir",
}


def apply_value(config: ExperimentConfig, key: str, value: Any):
    try:
        section, name, parse = KEYS[key]
    except KeyError:
        raise ConfigError(f"Unknown config key '{key}'")
    if isinstance(value, str):
        try:
            value = parse(value)
        except ValueError as e:
            raise ConfigError(f"Bad value for '{key}': {e}")
    target = config if section is None else getattr(config, section)
    setattr(target, name, value)


def parse_set_args(items: Sequence[str]) -> Dict[str, str]:
    """['train.epochs=3', ...] -> {'train.epochs': '3', ...}."""
    result = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Expected dotted.key=value, got '{item}'")
        result[key.strip()] = value.strip()
    return result


def read_manifest(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config manifest not found: {path}")
    values = dotenv_values(path, interpolate=False)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"{path}: keys without values: {missing}")
    return dict(values)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None,
                env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    config = ExperimentConfig()
    for env_key, key in ENV_KEYS.items():
        if env.get(env_key):
            apply_value(config, key, env[env_key])
    if path:
        manifest = read_manifest(path)
        for key, value in manifest.items():
            apply_value(config, key, value)
        logging.info(f"Loaded {len(manifest)} settings from {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            apply_value(config, key, value)
    return config.validate()


def to_manifest(config: ExperimentConfig) -> Dict[str, str]:
    """Flat dotted view of every key, the inverse of ``load_config``."""
    out = {}
    for key, (section, name, _) in KEYS.items():
        value = getattr(config if section is None else getattr(config, section), name)
        if isinstance(value, (list, tuple)):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        out[key] = "" if value is None else str(value)
    return out


def write_manifest(config: ExperimentConfig, path):
    lines = [f"{key}={value}" for key, value in to_manifest(config).items() if value != ""]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
