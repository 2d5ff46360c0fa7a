"""
JSON config files for the dataclasses-json config objects.

Config classes are declared with ``@dataclass_json(undefined=Undefined.RAISE)``, so unknown keys
fail the load instead of being dropped.
"""

import hashlib
import json
from typing import Any, Dict, Type, TypeVar

from dataclasses_json.undefined import UndefinedParameterError

from .atomic import PathLike, atomic_write

T = TypeVar("T")


class ConfigFileError(Exception):
    """Error with a config file"""


def canonical_json(data: Dict[str, Any]) -> str:
    """JSON text with sorted keys and no whitespace; equal dicts give equal text."""

    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short hex digest of a config object's canonical JSON."""

    return hashlib.sha256(canonical_json(obj.to_dict()).encode()).hexdigest()[:16]


def config_from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    """
    Make a config object from a dict.

    Raises
    ------
    ConfigFileError
        Unknown or missing keys, or values the config rejects.
    """

    if not isinstance(data, dict):
        raise ConfigFileError(f"{cls.__name__} must be a JSON object, got {type(data).__name__}")
    try:
        return cls.from_dict(data)  # type: ignore
    except UndefinedParameterError as e:
        raise ConfigFileError(f"unknown key in {cls.__name__}: {e}") from e
    except Exception as e:  # missing keys, bad types and the config's own validation errors
        raise ConfigFileError(f"invalid {cls.__name__}: {e}") from e


def load_config(path: PathLike, cls: Type[T]) -> T:
    """Read a JSON config file into a config object."""

    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigFileError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"config file {path} is not valid JSON: {e}") from e

    return config_from_dict(cls, data)


def save_config(path: PathLike, obj):
    """Write a config object as indented JSON."""

    atomic_write(path, json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n")
