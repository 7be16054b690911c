#!/usr/bin/env python3
"""Configuration module for sirlab: environment, logging and run-config files"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Union

import yaml
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker

from .errors import ConfigError
from .sirloop import SirConfig, get_preset


class Config:
    """Application configuration"""

    # Environment
    ENV = os.getenv("SIRLAB_ENV", "development")

    # State directory
    HOME = Path(os.getenv("SIRLAB_HOME", str(Path.home() / ".sirlab")))

    # Run catalogue
    DB_PATH = Path(os.getenv("SIRLAB_DB_PATH", str(HOME / "runs.db")))
    DB_URL = f"sqlite:///{DB_PATH}"

    # Logging configuration
    LOG_LEVEL = os.getenv("SIRLAB_LOG_LEVEL", "INFO")
    LOG_PATH = HOME / "sirlab.log"

    # Worker processes for sweeps
    THREADS = max(1, int(os.getenv("SIRLAB_THREADS", "1") or 1))

    @classmethod
    def ensure_home(cls):
        """Create the state directory if it doesn't exist"""
        if str(cls.DB_PATH) != ":memory:":
            cls.DB_PATH.parent.mkdir(parents=True, exist_ok=True)
        if cls.ENV == "production":
            cls.LOG_PATH.parent.mkdir(parents=True, exist_ok=True)

    @classmethod
    def get_engine(cls) -> Engine:
        """Get SQLAlchemy engine for the run catalogue"""
        cls.ensure_home()
        echo = cls.ENV == "development" and os.getenv("SIRLAB_SQL_ECHO") == "1"
        return create_engine(cls.DB_URL, echo=echo)

    @classmethod
    def get_session_maker(cls):
        """Get SQLAlchemy session maker"""
        return sessionmaker(bind=cls.get_engine())

    @classmethod
    def setup_logging(cls, level: str | None = None):
        """Setup application logging on the 'sirlab' logger"""
        cls.ensure_home()
        level_name = (level or cls.LOG_LEVEL).upper()

        logger = logging.getLogger("sirlab")
        logger.setLevel(getattr(logging, level_name, logging.INFO))

        # Clear existing handlers
        logger.handlers.clear()

        # Console handler
        console_handler = logging.StreamHandler()
        console_handler.setLevel(getattr(logging, level_name, logging.INFO))
        console_handler.setFormatter(
            logging.Formatter(
                "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
        logger.addHandler(console_handler)

        # File handler
        if cls.ENV == "production":
            file_handler = logging.FileHandler(cls.LOG_PATH)
            file_handler.setLevel(logging.INFO)
            file_handler.setFormatter(
                logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
            )
            logger.addHandler(file_handler)

        return logger


class DevelopmentConfig(Config):
    """Development environment configuration"""

    ENV = "development"
    LOG_LEVEL = os.getenv("SIRLAB_LOG_LEVEL", "DEBUG")


class ProductionConfig(Config):
    """Production environment configuration"""

    ENV = "production"
    LOG_LEVEL = os.getenv("SIRLAB_LOG_LEVEL", "INFO")


class TestingConfig(Config):
    """Testing environment configuration"""

    ENV = "testing"
    LOG_LEVEL = "DEBUG"
    DB_PATH = Path(":memory:")  # in-memory catalogue for tests
    DB_URL = "sqlite:///:memory:"


config_map = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
}


def get_config(env=None) -> type[Config]:
    """Get configuration for specified environment"""
    if env is None:
        env = os.getenv("SIRLAB_ENV", "development")
    return config_map.get(env, DevelopmentConfig)


# =============================================================================
# Run-config files
# =============================================================================


def _detect_format(filepath: Union[str, Path]) -> str:
    """Detect format from file extension."""
    ext = Path(filepath).suffix.lower()
    if ext in (".yaml", ".yml"):
        return "yaml"
    elif ext == ".json":
        return "json"
    raise ConfigError(f"Unsupported config format: {ext}. Use .yaml, .yml, or .json")


def _serialize(data: dict, fmt: str) -> str:
    """Serialize data to YAML or JSON string."""
    if fmt == "json":
        return json.dumps(data, indent=2)
    return yaml.safe_dump(data, default_flow_style=False, sort_keys=False)


def _deserialize(content: str, fmt: str) -> Any:
    """Deserialize YAML or JSON string."""
    try:
        if fmt == "json":
            return json.loads(content)
        return yaml.safe_load(content)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot parse {fmt.upper()} config: {e}") from None


def load_document(filepath: Union[str, Path]) -> dict[str, Any]:
    """Read a JSON or YAML mapping from disk."""
    fmt = _detect_format(filepath)
    try:
        content = Path(filepath).read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {filepath}: {e}") from None
    data = _deserialize(content, fmt)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {filepath} must contain a mapping")
    return data


def load_run_config(filepath: Union[str, Path]) -> SirConfig:
    """
    Load a SirConfig from a JSON or YAML file.

    A top-level `preset` key selects the base configuration that the
    remaining keys override.

    Raises:
        ConfigError: Unknown format, unknown keys or invalid values
    """
    data = load_document(filepath)
    preset = data.pop("preset", None)
    base = get_preset(preset) if preset else SirConfig()
    merged = base.to_dict()
    anneal = data.pop("anneal", None)
    if anneal is not None:
        if not isinstance(anneal, dict):
            raise ConfigError("anneal must be a mapping")
        merged["anneal"] = {**merged["anneal"], **anneal}
    unknown = set(data) - set(merged)
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    merged.update(data)
    return SirConfig.from_dict(merged)


def run_config_str(config: SirConfig, fmt: str = "yaml") -> str:
    """Render a SirConfig as YAML or JSON text (config template)."""
    if fmt not in ("yaml", "json"):
        raise ConfigError(f"Unknown output format '{fmt}'")
    return _serialize(config.to_dict(), fmt)


def save_run_config(config: SirConfig, filepath: Union[str, Path]) -> Path:
    path = Path(filepath)
    path.write_text(run_config_str(config, _detect_format(path)))
    return path
