"""Configuration management for rigidtrack runs."""

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv

from core.errors import ConfigError

# Load environment variables
load_dotenv()

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class LogLevel(Enum):
    """Values accepted by RIGIDTRACK_LOG."""
    ERROR = "error"
    WARN = "warn"
    INFO = "info"
    DEBUG = "debug"


@dataclass(frozen=True)
class FitConfig:
    """Every key of a fit run; config files and CLI flags override these defaults."""
    lambda_depth: float = 0.0
    robust_delta: float = 4.0
    use_static_override: bool = False
    sampson_threshold: float = 2.0
    lr: float = 1e-2
    iterations: int = 5000
    seed: int = 0
    embedding_dim: int = 16
    pretrain_iterations: int = 0
    static_mode: bool = False
    n_clusters: int = 4
    threads: int = 1
    check_grads: bool = False
    grad_check_coordinates: int = 64

    def __post_init__(self):
        if self.lambda_depth < 0:
            raise ConfigError(f"lambda_depth must be >= 0, got {self.lambda_depth}")
        if not self.robust_delta > 0:
            raise ConfigError(f"robust_delta must be > 0, got {self.robust_delta}")
        if self.sampson_threshold <= 0:
            raise ConfigError(f"sampson_threshold must be > 0, got {self.sampson_threshold}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("iterations", "pretrain_iterations", "grad_check_coordinates"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("embedding_dim", "n_clusters", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "FitConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Sorted key=value lines, readable by load_config_file."""
        return "".join(f"{key}={format_value(getattr(self, key))}\n" for key in sorted(self.keys()))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def coerce_value(key: str, raw: Any, annotation: type) -> Any:
    """Convert a raw config value to the field's type."""
    if not isinstance(raw, str):
        return annotation(raw)
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        return float(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def build_config(values: Mapping[str, Any], base: Optional[FitConfig] = None) -> FitConfig:
    """
    Apply key/value overrides on top of a base config.

    Raises:
        ConfigError: Unknown key or unparsable value
    """
    base = base or FitConfig()
    types = {f.name: f.type for f in fields(FitConfig)}
    changes = {}
    for key, raw in values.items():
        normalized = key.strip().lower().replace("-", "_")
        if normalized not in types:
            raise ConfigError(f"unknown config key: {key}")
        if raw is None:
            raise ConfigError(f"config key {key} has no value")
        changes[normalized] = coerce_value(normalized, raw, types[normalized])
    return base.replace(**changes)


def load_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Parse a key=value config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def resolve_config(config_path: Optional[Union[str, Path]] = None,
                   overrides: Optional[Mapping[str, Any]] = None) -> FitConfig:
    """Defaults < config file < explicit overrides."""
    config = FitConfig(threads=get_thread_count())
    if config_path is not None:
        config = build_config(load_config_file(config_path), config)
    if overrides:
        config = build_config(overrides, config)
    return config


def get_log_level_name() -> str:
    """
    Get the logging verbosity from RIGIDTRACK_LOG.

    Returns:
        str: One of error, warn, info, debug (info when unset or unknown)
    """
    raw = os.getenv("RIGIDTRACK_LOG", LogLevel.INFO.value).strip().lower()
    valid = {level.value for level in LogLevel}
    return raw if raw in valid else LogLevel.INFO.value


def get_thread_count() -> int:
    raw = os.getenv("RIGIDTRACK_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"RIGIDTRACK_THREADS must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"RIGIDTRACK_THREADS must be >= 1, got {threads}")
    return threads


def get_current_config() -> dict:
    """
    Get the environment-level configuration.

    Returns:
        dict: log level, thread count and tool-server bind address
    """
    return {
        "log_level": get_log_level_name(),
        "threads": get_thread_count(),
        "mcp_host": os.getenv("RIGIDTRACK_MCP_HOST", "0.0.0.0"),
        "mcp_port": int(os.getenv("RIGIDTRACK_MCP_PORT", "2500")),
        "acceptance": os.getenv("RIGIDTRACK_ACCEPTANCE", "0") == "1",
    }
