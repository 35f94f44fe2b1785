import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from collections.abc import Mapping

    from _typeshed import DataclassInstance

    from turnformer.stream import FilePath

logger = logging.getLogger(__name__)

JOBS_ENV = 'TURNFORMER_JOBS'


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f'invalid config value for {key}: {message}')
        self.key = key


_SCALARS: dict[str, type] = {'bool': bool, 'int': int, 'float': float, 'str': str}


def check_scalar(key: str, value: Any, expected: type) -> Any:
    """Return ``value`` if it is an ``expected`` scalar.

    Integers widen to float; booleans never stand in for numbers.
    """
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and expected is not bool:
        raise ConfigError(key, f'expected {expected.__name__}, got {value!r}')
    if not isinstance(value, expected):
        raise ConfigError(key, f'expected {expected.__name__}, got {value!r}')
    return value


def checked_fields(
    section: str,
    cls: 'type[DataclassInstance]',
    values: 'Mapping[str, Any]',
) -> dict[str, Any]:
    """Match ``values`` against the fields of dataclass ``cls``.

    Unknown keys are rejected. Fields declared as a plain scalar type are type
    checked with :func:`check_scalar`; the rest pass through for the caller.
    """
    declared = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(values) - set(declared)
    if unknown:
        raise ConfigError(section, f'unknown keys {sorted(unknown)}')
    checked = dict(values)
    for key, value in values.items():
        kind = declared[key]
        name = kind if isinstance(kind, str) else getattr(kind, '__name__', '')
        if name in _SCALARS:
            checked[key] = check_scalar(f'{section}.{key}', value, _SCALARS[name])
    return checked


def load_config(path: 'FilePath') -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), 'config file does not exist')
    try:
        loaded = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f'not valid JSON ({exc})') from exc
    if not isinstance(loaded, dict):
        raise ConfigError(str(path), 'top level must be an object')
    return loaded


def merge_overrides(
    base: 'Mapping[str, Any]',
    overrides: 'Mapping[str, Any]',
) -> dict[str, Any]:
    """Return ``base`` updated by ``overrides``; ``None`` overrides are ignored."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged


def canonical_json(values: 'Mapping[str, Any]') -> str:
    return json.dumps(values, sort_keys=True, separators=(',', ':'), default=str)


def config_digest(values: 'Mapping[str, Any]') -> str:
    return hashlib.sha256(canonical_json(values).encode('utf-8')).hexdigest()


def write_snapshot(values: 'Mapping[str, Any]', path: 'FilePath') -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(values, sort_keys=True, indent=2, default=str) + '\n',
        encoding='utf-8',
    )
    logger.debug('effective config written to %s', path)

