"""Configuration loading module."""

import os
from pathlib import Path
from typing import Any, Mapping, Optional, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from .models import InvalidConfiguration, MissingConfiguration, RunConfig, Settings

C = TypeVar("C", bound=RunConfig)

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def load_settings(env_file: Optional[str] = None) -> Settings:
    """
    Load process settings from environment variables.

    Args:
        env_file: Optional path to .env file

    Returns:
        Settings object

    Raises:
        InvalidConfiguration: If a setting has an invalid value
    """
    if env_file:
        load_dotenv(env_file, override=True)
    else:
        # Only load .env if it exists, don't override existing env vars
        load_dotenv(override=False)

    threads_str = os.getenv("TENSORAR_THREADS")
    log_level = os.getenv("TENSORAR_LOG_LEVEL", "INFO").upper()

    if threads_str is None or not threads_str.strip():
        threads = os.cpu_count() or 1
    else:
        try:
            threads = int(threads_str)
        except ValueError as e:
            raise InvalidConfiguration(
                f"TENSORAR_THREADS must be an integer, got {threads_str!r}"
            ) from e
        if threads < 1:
            raise InvalidConfiguration(f"TENSORAR_THREADS must be at least 1, got {threads}")

    if log_level not in VALID_LOG_LEVELS:
        raise InvalidConfiguration(
            f"TENSORAR_LOG_LEVEL must be one of {VALID_LOG_LEVELS}, got {log_level}"
        )

    return Settings(threads=threads, log_level=log_level)


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def load_run_config(
    model_cls: type[C],
    config_file: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> C:
    """
    Build a command configuration from a key=value file and flag overrides.

    Flags that were given (not None) take precedence over file values.

    Args:
        model_cls: RunConfig subclass of the command
        config_file: Optional key=value file
        overrides: Flag values keyed by field name

    Returns:
        Validated configuration

    Raises:
        MissingConfiguration: If the config file does not exist
        InvalidConfiguration: If validation fails or keys are unknown
    """
    values: dict[str, Any] = {}
    if config_file is not None:
        if not Path(config_file).is_file():
            raise MissingConfiguration(f"config file {config_file} not found")
        values.update(
            {
                _normalize_key(key): value
                for key, value in dotenv_values(config_file).items()
                if value is not None
            }
        )
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})

    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise InvalidConfiguration(f"Invalid configuration: {e}") from e
