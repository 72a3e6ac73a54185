"""Experiment configuration: strict YAML loading into dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from taskqp.trainer import TrainConfig

__all__ = [
    "ConfigError",
    "ModelSpec",
    "ExperimentConfig",
    "METHODS",
    "METHOD_TASKS",
    "TASKS",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]

TASKS = ("inventory", "generation", "storage")

# which baselines and trainers make sense on which problem:
# - cost-weighted regression is the generation-specific baseline
# - storage has no feasible-set projection for raw policy outputs
# - a plain least-squares fit of log prices IS the storage mle, so a
#   separate rmse row would duplicate it
METHOD_TASKS = {
    "true_model": {"inventory", "generation", "storage"},
    "mle_linear": {"inventory", "generation", "storage"},
    "mle_nonlinear": {"inventory", "generation", "storage"},
    "rmse": {"inventory", "generation"},
    "cost_weighted": {"generation"},
    "policy_linear": {"inventory", "generation"},
    "policy_nonlinear": {"inventory", "generation"},
    "task_linear": {"inventory", "generation", "storage"},
    "task_nonlinear": {"inventory", "generation", "storage"},
}
METHODS = tuple(METHOD_TASKS)

_WARM_START_METHODS = {"task_linear", "task_nonlinear", "policy_linear",
                       "policy_nonlinear", "cost_weighted"}


class ConfigError(ValueError):
    """A configuration file that cannot be run."""


@dataclass
class ModelSpec:
    hidden: int = 200
    dropout: float = 0.2
    residual: bool = False

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ConfigError("model.hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")


@dataclass
class ExperimentConfig:
    task: str
    methods: list[str]
    seeds: list[int]
    train_sizes: list[int]
    test_size: int
    val_fraction: float = 0.2
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=10))
    pretrain: TrainConfig | None = None
    task_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of "
                              f"{', '.join(TASKS)}")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHOD_TASKS:
                raise ConfigError(f"unknown method {m!r}")
            if self.task not in METHOD_TASKS[m]:
                raise ConfigError(
                    f"method {m!r} does not apply to task {self.task!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods contains duplicates")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.train_sizes or min(self.train_sizes) < 4:
            raise ConfigError("train_sizes must contain sizes >= 4")
        if self.test_size < 1:
            raise ConfigError("test_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.pretrain is None and _WARM_START_METHODS & set(self.methods):
            need = sorted(_WARM_START_METHODS & set(self.methods))
            raise ConfigError(f"methods {need} need a pretrain block")


def _build(cls, section: str, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} section: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    parsed = {}
    if "model" in data:
        parsed["model"] = _build(ModelSpec, "model", data.pop("model"))
    if "train" in data:
        parsed["train"] = _build(TrainConfig, "train", data.pop("train"))
    if data.get("pretrain") is not None:
        parsed["pretrain"] = _build(TrainConfig, "pretrain", data.pop("pretrain"))
    else:
        data.pop("pretrain", None)
    return _build(ExperimentConfig, "config", {**data, **parsed})


def config_to_dict(config: ExperimentConfig) -> dict:
    out = dataclasses.asdict(config)
    if out["pretrain"] is None:
        del out["pretrain"]
    return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=False)
