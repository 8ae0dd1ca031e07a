"""Experiment configuration: TOML parsing with strict keys, defaults, and
builders for the target mixture, the error-perturbed model, and the schedule.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .diffusion import DiffusionModel, KERNEL_MODES, VARIANCE_RULES
from .discriminator import LAMBDA_RULES
from .gmm import GaussianMixture, gmm_from_dict
from .rejection import Strategy, TERMINAL_RATIO_MODES
from .schedule import NoiseSchedule, SCHEDULE_RULES, make_vp_schedule

TARGET_PRESETS = ("ring", "pair1d", "custom")
ESTIMATOR_MODES = ("oracle", "disc")


class ConfigError(ValueError):
    pass


@dataclass
class TargetSpec:
    preset: str = "ring"
    n_modes: int = 8
    radius: float = 2.0
    component_std: float = 0.35
    dim: int = 2
    separation: float = 2.0
    components: list = field(default_factory=list)


@dataclass
class ModelErrorSpec:
    mean_shift: float = 0.5
    weight_tilt: float = 0.0
    cov_scale: float = 1.0


@dataclass
class ScheduleSpec:
    steps: int = 32
    beta_start: float = 1e-3
    beta_end: float = 0.25
    rule: str = "linear"


@dataclass
class DiscriminatorSpec:
    hidden: list = field(default_factory=lambda: [64, 64])
    num_frequencies: int = 8
    epochs: int = 40
    batch: int = 256
    lr: float = 0.05
    lambda_rule: str = "beta_over_var"
    n_train_real: int = 4000
    n_train_fake: int = 4000


@dataclass
class EvaluationSpec:
    n_projections: int = 128
    n_reference: int = 20000
    n_bound_mc: int = 0          # 0 skips the bound estimators


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "runs/out"
    gamma: float = 80.0
    max_evals: object = "auto"   # "auto" = 3*steps, "unbounded" = no cap, or int
    n_chains: int = 1000
    n_calib: int = 1000
    n_seeds: int = 1
    estimator: str = "oracle"
    terminal_ratio: str = "prior"
    kernel_mode: str = "exact_reverse"
    variance_rule: str = "beta"
    strategies: list = field(default_factory=lambda: ["FullDiffRS", "NoRejection"])
    target: TargetSpec = field(default_factory=TargetSpec)
    model_error: ModelErrorSpec = field(default_factory=ModelErrorSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)

    def run_seeds(self) -> list:
        return [self.seed + i for i in range(self.n_seeds)]

    def resolved_max_evals(self) -> int | None:
        if self.max_evals == "auto":
            return 3 * self.schedule.steps
        if self.max_evals == "unbounded":
            return None
        return int(self.max_evals)


_SECTIONS = {
    "target": TargetSpec,
    "model_error": ModelErrorSpec,
    "schedule": ScheduleSpec,
    "discriminator": DiscriminatorSpec,
    "evaluation": EvaluationSpec,
}


def _build_section(cls, obj: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return cls(**obj)


def config_from_dict(obj: dict) -> ExperimentConfig:
    obj = dict(obj)
    if "seed" not in obj:
        raise ConfigError("missing required key: seed")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = obj.pop(name, None)
        if raw is not None:
            if not isinstance(raw, dict):
                raise ConfigError(f"[{name}] must be a table")
            sections[name] = _build_section(cls, raw, name)
    top_allowed = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(obj) - top_allowed
    if unknown:
        raise ConfigError(f"unknown key(s): {sorted(unknown)}")
    cfg = ExperimentConfig(**obj, **sections)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if not 0.0 <= cfg.gamma <= 100.0:
        raise ConfigError("gamma must lie in [0, 100]")
    if cfg.max_evals not in ("auto", "unbounded") and not isinstance(cfg.max_evals, int):
        raise ConfigError('max_evals must be an integer, "auto", or "unbounded"')
    if cfg.estimator not in ESTIMATOR_MODES:
        raise ConfigError(f"estimator must be one of {ESTIMATOR_MODES}")
    if cfg.terminal_ratio not in TERMINAL_RATIO_MODES:
        raise ConfigError(f"terminal_ratio must be one of {TERMINAL_RATIO_MODES}")
    if cfg.kernel_mode not in KERNEL_MODES:
        raise ConfigError(f"kernel_mode must be one of {KERNEL_MODES}")
    if cfg.variance_rule not in VARIANCE_RULES:
        raise ConfigError(f"variance_rule must be one of {VARIANCE_RULES}")
    if cfg.schedule.rule not in SCHEDULE_RULES:
        raise ConfigError(f"schedule.rule must be one of {SCHEDULE_RULES}")
    if cfg.discriminator.lambda_rule not in LAMBDA_RULES:
        raise ConfigError(f"discriminator.lambda_rule must be one of {LAMBDA_RULES}")
    if cfg.target.preset not in TARGET_PRESETS:
        raise ConfigError(f"target.preset must be one of {TARGET_PRESETS}")
    if cfg.n_chains < 1 or cfg.n_calib < 2 or cfg.n_seeds < 1:
        raise ConfigError("n_chains >= 1, n_calib >= 2, n_seeds >= 1 required")
    for s in cfg.strategies:
        try:
            Strategy(s)
        except ValueError:
            raise ConfigError(
                f"unknown strategy {s!r}; choose from "
                f"{[x.value for x in Strategy]}"
            ) from None


def parse_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = _toml.load(fh)
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


# ----------------------------------------------------------------------
# TOML writer (round-trips everything config_from_dict reads)
# ----------------------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def dump_config(cfg: ExperimentConfig, path) -> None:
    text = config_to_toml(cfg)
    with open(path, "w") as fh:
        fh.write(text)


def config_to_toml(cfg: ExperimentConfig) -> str:
    obj = asdict(cfg)
    lines = []
    for key in [f.name for f in fields(ExperimentConfig) if f.name not in _SECTIONS]:
        lines.append(f"{key} = {_toml_value(obj[key])}")
    for name in _SECTIONS:
        section = obj[name]
        components = section.pop("components", None)
        lines.append(f"\n[{name}]")
        for key, value in section.items():
            lines.append(f"{key} = {_toml_value(value)}")
        if components:
            for comp in components:
                lines.append(f"\n[[{name}.components]]")
                for key, value in comp.items():
                    lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------

def build_target(spec: TargetSpec) -> GaussianMixture:
    if spec.preset == "ring":
        if spec.dim != 2:
            raise ConfigError("the ring target is two-dimensional")
        angles = np.linspace(0.0, 2.0 * np.pi, spec.n_modes, endpoint=False)
        means = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        covs = np.tile(spec.component_std**2 * np.eye(2), (spec.n_modes, 1, 1))
        return GaussianMixture(
            weights=np.full(spec.n_modes, 1.0 / spec.n_modes), means=means, covs=covs
        )
    if spec.preset == "pair1d":
        half = spec.separation / 2.0
        return GaussianMixture(
            weights=np.array([0.5, 0.5]),
            means=np.array([[-half], [half]]),
            covs=np.tile(spec.component_std**2 * np.eye(1), (2, 1, 1)),
        )
    if not spec.components:
        raise ConfigError("custom target needs a components list")
    return gmm_from_dict({"dim": spec.dim, "components": spec.components})


def apply_model_error(q0: GaussianMixture, err: ModelErrorSpec) -> GaussianMixture:
    """Perturb the target into the model's implied data distribution.

    The mean shift has Euclidean length `mean_shift` along the all-ones
    direction; the weight tilt reweights components geometrically; the
    covariance scale inflates or deflates every component.
    """
    d = q0.dim
    k = q0.n_components
    shift = err.mean_shift / np.sqrt(d) * np.ones(d)
    if k > 1:
        u = np.arange(k) / (k - 1) - 0.5
    else:
        u = np.zeros(1)
    w = q0.weights * np.exp(err.weight_tilt * u)
    w = w / w.sum()
    return GaussianMixture(
        weights=w, means=q0.means + shift, covs=err.cov_scale * q0.covs
    )


def build_schedule(spec: ScheduleSpec) -> NoiseSchedule:
    return make_vp_schedule(spec.steps, spec.beta_start, spec.beta_end, spec.rule)


def build_model(cfg: ExperimentConfig, q0: GaussianMixture) -> DiffusionModel:
    return DiffusionModel(
        p0=apply_model_error(q0, cfg.model_error),
        kernel_mode=cfg.kernel_mode,
        kernel_variance_rule=cfg.variance_rule,
    )
