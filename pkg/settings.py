"""
g2kit runtime settings
Environment (.env) handling and key=value configuration files.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union, get_type_hints

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

load_dotenv()

logger = logging.getLogger('g2kit.settings')

VERSION = '1.0.0'

T = TypeVar('T')

_NONE_VALUES = {'', 'none', 'null'}
_TRUE_VALUES = {'1', 'true', 'yes', 'on'}
_FALSE_VALUES = {'0', 'false', 'no', 'off'}


def thread_cap() -> int:
    """Maximum worker threads, from G2KIT_THREADS (defaults to the CPU count)"""
    raw = os.getenv('G2KIT_THREADS')
    if raw:
        try:
            value = int(raw)
        except ValueError:
            logger.warning(f"Ignoring non-integer G2KIT_THREADS={raw!r}")
        else:
            return max(1, value)
    return os.cpu_count() or 1


def log_dir() -> Path:
    return Path(os.getenv('G2KIT_LOG_DIR', 'logs'))


def log_level() -> str:
    return os.getenv('G2KIT_LOG_LEVEL', 'INFO').upper()


@dataclass
class PipelineConfig:
    """Numeric defaults shared by the CLI subcommands"""
    window_ns: float = 16.0
    k: float = 2.0
    excitation_rate_hz: float = 2.5e6
    bin_width_ns: float = 1.0
    range_periods: float = 1.5
    strict: bool = False
    threads: int = field(default_factory=thread_cap)


def _coerce(name: str, raw: Optional[str], target: Any) -> Any:
    text = '' if raw is None else raw.strip()
    optional = getattr(target, '__origin__', None) is Union and type(None) in target.__args__
    if optional:
        if text.lower() in _NONE_VALUES:
            return None
        target = next(arg for arg in target.__args__ if arg is not type(None))
    try:
        if target is bool:
            lowered = text.lower()
            if lowered in _TRUE_VALUES:
                return True
            if lowered in _FALSE_VALUES:
                return False
            raise ValueError(text)
        if target is int:
            if text.lower().startswith(('0x', '0o', '0b')):
                return int(text, 0)
            return int(text)
        if target is float:
            return float(text)
        if target is str:
            return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {target.__name__}") from None
    raise ConfigError(f"{name}: unsupported field type {target!r}")


def from_mapping(cls: Type[T], values: Mapping[str, Optional[str]], base: Optional[T] = None) -> T:
    """
    Build a dataclass instance from string values, coercing each to its field type.

    Args:
        cls: target dataclass
        values: key -> raw string (as read from a key=value file)
        base: instance supplying the values of keys not present

    Returns:
        New instance of cls
    """
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")

    kwargs: Dict[str, Any] = {}
    if base is not None:
        kwargs.update({f.name: getattr(base, f.name) for f in dataclasses.fields(cls)})
    for key, raw in values.items():
        kwargs[key] = _coerce(key, raw, hints[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_key_values(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Read a key=value file (comments with #, blank lines ignored)"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    values = dict(dotenv_values(path))
    logger.debug(f"Read {len(values)} keys from {path}")
    return values


def dump_key_values(obj: Any, path: Union[str, Path]) -> None:
    """Write a dataclass as key=value lines, one per field"""
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            text = 'none'
        elif isinstance(value, bool):
            text = 'true' if value else 'false'
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    Path(path).write_text('\n'.join(lines) + '\n')
