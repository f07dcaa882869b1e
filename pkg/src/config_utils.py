"""
This module provides functions to load, save, and manage configuration settings.

Configuration files are flat `key = value` text with dotted section keys
(`planner.horizon = 25`), read and written with python-dotenv. `build_experiment_config`
turns the string mapping into the typed, validated `ExperimentConfig`.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Type

from dotenv import dotenv_values, load_dotenv, set_key

from agent import AgentConfig
from datagen import FilterConfig
from envs import TaskPair, make_task_pair
from errors import ConfigError, WombetError
from planner import ROLLOUT_MODES, PlannerConfig
from transfer import ControllerConfig
from world_model import ModelConfig

_ENV_FILE: str = ".env"
logger: logging.Logger = logging.getLogger("Wombet")

# Load environment variables (WOMBET_CONFIG, WOMBET_LOG_LEVEL)
load_dotenv(_ENV_FILE)

_TRUE: Tuple[str, ...] = ("1", "true", "yes", "on")
_FALSE: Tuple[str, ...] = ("0", "false", "no", "off")


@dataclass(frozen=True)
class EnvConfig:
    """Task-pair construction parameters; blank values take the pair's defaults."""

    dt: Optional[float] = None
    horizon: Optional[int] = None
    friction: Optional[float] = None
    gamma: float = 0.99
    target_velocity_weight: float = 0.5
    target_setpoint: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run depends on."""

    task_pair: str = "pendulum"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    budget: int = 30000
    datagen_mode: str = "real-mpc"
    refine_every: int = 5000
    refresh_episodes: int = 20
    seed_transitions: int = 5000
    dataset_episodes: int = 20
    eval_every: int = 1000
    eval_episodes: int = 10
    replay_capacity: int = 100000
    out_dir: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ConfigError("experiment.budget must be >= 0")
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if self.datagen_mode not in ROLLOUT_MODES:
            raise ConfigError(f"experiment.datagen_mode must be one of {', '.join(ROLLOUT_MODES)}")
        for name in ("refine_every", "eval_every", "eval_episodes", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"experiment.{name} must be positive")

    def task(self) -> TaskPair:
        """Build the configured task pair."""
        return make_task_pair(
            self.task_pair,
            dt=self.env.dt,
            horizon=self.env.horizon,
            friction=self.env.friction,
            gamma=self.env.gamma,
            target_velocity_weight=self.env.target_velocity_weight,
            target_setpoint=self.env.target_setpoint,
        )

    def flatten(self) -> Dict[str, str]:
        """The dotted key/value view of this config, values rendered as config-file text."""
        flat: Dict[str, str] = {}
        for item in dataclasses.fields(self):
            value = getattr(self, item.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{item.name}.{sub.name}"] = _render(getattr(value, sub.name))
            else:
                flat[f"experiment.{item.name}"] = _render(value)
        return flat


_SECTIONS: Dict[str, Type[Any]] = {
    "env": EnvConfig,
    "model": ModelConfig,
    "planner": PlannerConfig,
    "filter": FilterConfig,
    "agent": AgentConfig,
    "controller": ControllerConfig,
}


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(text: str, hint: Any, key: str) -> Any:
    """Parse config text according to a dataclass field annotation."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = text.strip()
    if origin is typing.Union and type(None) in args:
        if text == "" or text.lower() == "none":
            return None
        return _convert(text, next(a for a in args if a is not type(None)), key)
    try:
        if origin is tuple:
            return tuple(_convert(part, args[0], key) for part in text.split(",") if part.strip())
        if hint is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"'{text}' is not a boolean")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from e


def default_config() -> Dict[str, str]:
    """Every known key with its default value."""
    defaults = ExperimentConfig().flatten()
    defaults["log.level"] = "INFO"
    return defaults


def _ensure_required_keys(config: Dict[str, str]) -> None:
    """
    Fill missing keys from the defaults and reject unknown ones.

    Args:
        config (Dict[str, str]): The configuration data to check and update.
    """
    defaults = default_config()
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    missing = [key for key in defaults if key not in config]
    if missing:
        logger.debug("Config keys taken from defaults: %s", missing)
        for key in missing:
            config[key] = defaults[key]


def load_config(path: Optional[str] = None) -> Dict[str, str]:
    """
    Load configuration from a key/value file. If the file does not exist,
    create it with every key set to its default.

    Args:
        path (Optional[str], optional): Config file; defaults to $WOMBET_CONFIG, or
            built-in defaults when neither is given.

    Returns:
        Dict[str, str]: Configuration data, one entry per known key.
    """
    path = path or os.getenv("WOMBET_CONFIG")
    try:
        if not path:
            return default_config()
        if not os.path.exists(path):
            logger.info("%s not found. Creating it with default values.", path)
            config = default_config()
            save_config(config, path)
            return config
        raw = dotenv_values(path)
        config = {key: ("" if value is None else value) for key, value in raw.items()}
        _ensure_required_keys(config)
        return config
    except ConfigError:
        raise
    except (OSError, IOError) as e:
        logger.critical("Failed to read %s: %s", path, e)
        raise


def save_config(config: Dict[str, str], path: str) -> None:
    """
    Save configuration to a key/value file, one `key=value` line per entry.

    Args:
        config (Dict[str, str]): Configuration data to save.
        path (str): Destination file.
    """
    try:
        if not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as file:
                file.write("# wombet configuration\n")
        for key, value in config.items():
            set_key(path, key, value, quote_mode="never")
        logger.debug("Configuration saved successfully to %s.", path)
    except (OSError, IOError) as e:
        logger.critical("Failed to save configuration to %s: %s", path, e)
        raise


def set_config_variable(path: str, key: str, value: Any) -> None:
    """
    Set one configuration variable in a file and save it.

    Args:
        path (str): Config file.
        key (str): Dotted key.
        value (Any): New value, rendered as config text.
    """
    if key not in default_config():
        raise ConfigError(f"unknown configuration key '{key}'")
    config = load_config(path)
    rendered = _render(value)
    if config.get(key) != rendered:
        set_key(path, key, rendered, quote_mode="never")
        logger.debug("Configuration key '%s' changed and saved to %s.", key, path)


def get_config_variable(key: str, path: Optional[str] = None, default: str = "") -> str:
    """
    Retrieve a configuration variable.

    Args:
        key (str): Dotted key.
        path (Optional[str], optional): Config file.
        default (str, optional): Value when the key is absent. Defaults to "".

    Returns:
        str: Configuration value.
    """
    return load_config(path).get(key, default)


def build_experiment_config(mapping: Dict[str, str]) -> ExperimentConfig:
    """
    Convert a string mapping into a validated `ExperimentConfig`.

    `agent.penalty` left blank follows `planner.penalty`.

    Args:
        mapping (Dict[str, str]): Dotted keys to config text; missing keys take defaults.

    Returns:
        ExperimentConfig: The typed config.
    """
    config = dict(mapping)
    _ensure_required_keys(config)
    try:
        sections: Dict[str, Any] = {}
        for section, cls in _SECTIONS.items():
            hints = typing.get_type_hints(cls)
            values: Dict[str, Any] = {}
            for item in dataclasses.fields(cls):
                key = f"{section}.{item.name}"
                if key == "agent.penalty" and config[key].strip() == "":
                    continue
                values[item.name] = _convert(config[key], hints[item.name], key)
            if section == "agent" and "penalty" not in values:
                values["penalty"] = sections["planner"].penalty
            sections[section] = cls(**values)
        hints = typing.get_type_hints(ExperimentConfig)
        scalars = {
            item.name: _convert(config[f"experiment.{item.name}"], hints[item.name], f"experiment.{item.name}")
            for item in dataclasses.fields(ExperimentConfig)
            if item.name not in _SECTIONS
        }
        experiment = ExperimentConfig(**scalars, **sections)
        experiment.task()
        return experiment
    except ConfigError:
        raise
    except WombetError as e:
        raise ConfigError(str(e)) from e
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def config_diff(first: ExperimentConfig, second: ExperimentConfig) -> Dict[str, Tuple[str, str]]:
    """Keys whose values differ between two configs."""
    a, b = first.flatten(), second.flatten()
    return {key: (a[key], b[key]) for key in a if a[key] != b[key]}
