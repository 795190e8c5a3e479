"""
Experiment configuration: defaults, YAML loading and saving, seed resolution,
and construction of the target, family and stepsize schedule a config describes.

Config files are flat YAML mappings with dotted section prefixes
(`target.dim: 10`); nested sections are accepted and flattened on load.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml
from dotenv import load_dotenv

from bbvi.errors import BBVIError, ConfigurationError
from bbvi.family import CONDITIONER_KINDS, FAMILY_KINDS, Conditioner, FamilyConfig
from bbvi.optimizers import OPTIMIZER_KINDS, StepSchedule
from bbvi.estimators import TOTAL_GRADIENT_ESTIMATORS
from bbvi.targets import QuadraticTarget, make_conditioned_gaussian, make_logistic_target

logger = logging.getLogger(__name__)

SEED_ENV = "BBVI_LAB_SEED"
TARGET_KINDS = ("quadratic", "logistic")
SCHEDULE_KINDS = ("fixed", "inv_sqrt", "two_stage", "theory")
DEFAULT_VARIANTS = ["prox_sgd/identity", "sgd/identity", "sgd/softplus"]

DEFAULTS = {
    "target.kind": "quadratic",
    "target.dim": 10,
    "target.condition_number": 10.0,
    "target.smoothness": 100.0,
    "target.matrix": None,
    "target.mean": None,
    "target.offset": 0.0,
    "target.num_data": 100,
    "target.prior_precision": 1.0,
    "family.kind": "cholesky",
    "family.conditioner": "identity",
    "optimizer.kind": "prox_sgd",
    "optimizer.stepsize": 1e-3,
    "optimizer.schedule": "fixed",
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.999,
    "optimizer.eps": 1e-8,
    "estimator.kind": "cfe",
    "estimator.samples": 10,
    "run.iterations": 10_000,
    "run.eps_kl": 1.0,
    "run.replications": 10,
    "run.base_seed": 0,
    "run.checkpoint_every": 100,
    "run.init_scale": 1.0,
    "sweep.stepsizes": [float(x) for x in np.logspace(-6, 0, 13)],
    "sweep.init_scales": [1.0, 1e-3, 1e-5],
    "sweep.variants": DEFAULT_VARIANTS,
    "output.path": "results.csv",
}


@dataclass
class ExperimentConfig:
    target_kind: str
    target_dim: int
    target_condition_number: float
    target_smoothness: float
    target_matrix: list | None
    target_mean: list | None
    target_offset: float
    target_num_data: int
    target_prior_precision: float
    family_kind: str
    family_conditioner: str
    optimizer_kind: str
    optimizer_stepsize: float
    optimizer_schedule: str
    optimizer_beta1: float
    optimizer_beta2: float
    optimizer_eps: float
    estimator_kind: str
    estimator_samples: int
    run_iterations: int
    run_eps_kl: float
    run_replications: int
    run_base_seed: int
    run_checkpoint_every: int
    run_init_scale: float
    sweep_stepsizes: list = field(default_factory=list)
    sweep_init_scales: list = field(default_factory=list)
    sweep_variants: list = field(default_factory=list)
    output_path: str = "results.csv"

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        merged = dict(DEFAULTS)
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
        merged.update(values)
        kwargs = {}
        for f in fields(cls):
            key = _dotted(f.name)
            kwargs[f.name] = _coerce(key, merged[key], f.type)
        config = cls(**kwargs)
        config.validate()
        return config

    def to_mapping(self) -> dict:
        return {_dotted(name): value for name, value in asdict(self).items()}

    @property
    def variants(self) -> list[tuple[str, str]]:
        return [tuple(variant.split("/", 1)) for variant in self.sweep_variants]

    def validate(self):
        counts = {
            "target.dim": self.target_dim,
            "target.num_data": self.target_num_data,
            "estimator.samples": self.estimator_samples,
            "run.iterations": self.run_iterations,
            "run.replications": self.run_replications,
            "run.checkpoint_every": self.run_checkpoint_every,
        }
        for key, value in counts.items():
            if value < 1:
                raise ConfigurationError(f"{key} must be at least 1, got {value}")
        _choice("target.kind", self.target_kind, TARGET_KINDS)
        _choice("family.kind", self.family_kind, FAMILY_KINDS)
        _choice("family.conditioner", self.family_conditioner, CONDITIONER_KINDS)
        _choice("optimizer.kind", self.optimizer_kind, OPTIMIZER_KINDS)
        _choice("optimizer.schedule", self.optimizer_schedule, SCHEDULE_KINDS)
        _choice("estimator.kind", self.estimator_kind, tuple(TOTAL_GRADIENT_ESTIMATORS))
        if not self.run_eps_kl > 0:
            raise ConfigurationError(f"run.eps_kl must be positive, got {self.run_eps_kl}")
        if self.optimizer_stepsize <= 0 or self.run_init_scale <= 0:
            raise ConfigurationError("optimizer.stepsize and run.init_scale must be positive")
        if self.target_condition_number < 1 or self.target_smoothness <= 0:
            raise ConfigurationError("target.condition_number must be >= 1 and target.smoothness > 0")
        if not (0 <= self.run_base_seed < 2**64):
            raise ConfigurationError(f"run.base_seed must be an unsigned 64-bit integer, got {self.run_base_seed}")
        if not self.sweep_stepsizes or not self.sweep_init_scales or not self.sweep_variants:
            raise ConfigurationError("sweep.stepsizes, sweep.init_scales and sweep.variants must be non-empty")
        if any(x <= 0 for x in self.sweep_stepsizes + self.sweep_init_scales):
            raise ConfigurationError("Sweep stepsizes and init scales must be positive")
        for variant in self.sweep_variants:
            optimizer, _, conditioner = variant.partition("/")
            _choice("sweep.variants optimizer", optimizer, OPTIMIZER_KINDS)
            _choice("sweep.variants conditioner", conditioner, CONDITIONER_KINDS)


def _dotted(name: str) -> str:
    section, _, key = name.partition("_")
    return f"{section}.{key}"


def _choice(key: str, value, allowed):
    if value not in allowed:
        raise ConfigurationError(f"{key} must be one of {allowed}, got {value!r}")


def _as_float(key: str, value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} must be a number, got {value!r}") from None


def _as_int(key: str, value) -> int:
    number = _as_float(key, value)
    if not math.isfinite(number) or number != int(number):
        raise ConfigurationError(f"{key} must be an integer, got {value!r}")
    return int(value) if isinstance(value, int) else int(number)


def _coerce(key: str, value, kind):
    if kind is int:
        return _as_int(key, value)
    if kind is float:
        return _as_float(key, value)
    if kind is str:
        return str(value)
    if value is None:
        return None
    if not isinstance(value, list):
        raise ConfigurationError(f"{key} must be a list, got {value!r}")
    if key in ("sweep.stepsizes", "sweep.init_scales", "target.mean"):
        return [_as_float(key, x) for x in value]
    if key == "target.matrix":
        return [[_as_float(key, x) for x in row] for row in value]
    return [str(x) for x in value]


def _flatten_sections(values: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten_sections(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def load_config(path: str | None = None) -> ExperimentConfig:
    """Defaults overridden key by key by the YAML file at `path` (if given)."""
    if path is None:
        return ExperimentConfig.from_mapping({})
    try:
        with open(path, "r") as f:
            loaded = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Configuration file {path} not found") from None
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Could not read configuration {path}: {e}") from e
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"Configuration {path} must be a mapping of keys to values")
    config = ExperimentConfig.from_mapping(_flatten_sections(loaded))
    logger.info(f"Configuration loaded from {path}")
    return config


def save_config(config: ExperimentConfig, path: str):
    with open(path, "w") as f:
        yaml.safe_dump(config.to_mapping(), f, sort_keys=False, default_flow_style=None)


def resolve_seed(flag: int | None, config: ExperimentConfig | None = None) -> int:
    """--seed wins, then BBVI_LAB_SEED (from the environment or a .env file), then run.base_seed."""
    if flag is not None:
        seed = flag
    else:
        load_dotenv()
        env_value = os.environ.get(SEED_ENV)
        if env_value:
            try:
                seed = int(env_value)
            except ValueError:
                raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env_value!r}") from None
        else:
            seed = config.run_base_seed if config is not None else 0
    if not (0 <= seed < 2**64):
        raise ConfigurationError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def build_family(config: ExperimentConfig, conditioner: str | None = None) -> FamilyConfig:
    kind = conditioner or config.family_conditioner
    return FamilyConfig(kind=config.family_kind, conditioner=Conditioner(kind), dim=config.target_dim)


def build_target(config: ExperimentConfig, rng: np.random.Generator):
    """The generated or explicit quadratic target, or a synthetic logistic regression."""
    try:
        if config.target_kind == "logistic":
            return make_logistic_target(config.target_num_data, config.target_dim, config.target_prior_precision, rng)
        if config.target_matrix is not None:
            mean = config.target_mean if config.target_mean is not None else np.zeros(config.target_dim)
            target = QuadraticTarget(config.target_matrix, mean, config.target_offset)
            if target.dim != config.target_dim:
                raise ConfigurationError(f"target.matrix is {target.dim}x{target.dim} but target.dim is {config.target_dim}")
            return target
        return make_conditioned_gaussian(
            config.target_dim, config.target_condition_number, config.target_smoothness, rng, mean=config.target_mean
        )
    except ConfigurationError:
        raise
    except BBVIError as e:
        raise ConfigurationError(f"Invalid target configuration: {e}") from e


def build_schedule(config: ExperimentConfig, target, family: FamilyConfig, stepsize: float | None = None) -> StepSchedule:
    gamma = config.optimizer_stepsize if stepsize is None else stepsize
    kind = config.optimizer_schedule
    if kind == "fixed":
        return StepSchedule.fixed(gamma)
    if kind == "inv_sqrt":
        return StepSchedule.inv_sqrt(gamma)
    theory = StepSchedule.theory(target, family, config.estimator_samples)
    if kind == "theory":
        return theory
    return StepSchedule.two_stage(gamma, target.strong_convexity, theory.switch)
