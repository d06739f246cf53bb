"""Flat ``key = value`` configuration files for the config dataclasses.

Keys are dataclass field names. Values are parsed by the field's annotated
type; fields whose metadata carries ``distance`` also accept unit suffixes
(``80m``, ``100mm``). Overrides (``--set key=value``) are applied after the
file.
"""
import concurrent.futures
import dataclasses
import hashlib
import logging
import os

from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Type, TypeVar, get_type_hints

from ssdepth.errors import ConfigError
from ssdepth.measures import parse_measure

logger = logging.getLogger(__name__)

THREADS_ENV = 'SSD_THREADS'

C = TypeVar('C')
T = TypeVar('T')
R = TypeVar('R')


def str_to_bool(value: str) -> bool:
    if value.lower() in {'true', 'yes', 'y', '1'}:
        return True
    elif value.lower() in {'false', 'no', 'n', '0'}:
        return False
    else:
        raise ValueError(f"Invalid boolean value: '{value}'")


def distance_field(default: float) -> Any:
    return dataclasses.field(default=default, metadata={'distance': True})


def _parse_value(field: 'dataclasses.Field[Any]', kind: Any, text: str) -> Any:
    text = text.strip()
    if kind is bool:
        return str_to_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        if field.metadata.get('distance'):
            return parse_measure(text).value()
        return float(text)
    if kind is str:
        return text
    raise ConfigError(f"field '{field.name}' has unsupported type {kind}")


def parse_lines(lines: Iterable[str], source: str = '<config>') -> List[Tuple[str, str]]:
    pairs = []
    for number, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{raw.rstrip()}'")
        key, value = line.split('=', 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(config: C, pairs: Sequence[Tuple[str, str]]) -> C:
    """Return a copy of ``config`` with ``pairs`` parsed and applied in order."""
    fields = {f.name: f for f in dataclasses.fields(config)}  # type: ignore[arg-type]
    hints = get_type_hints(type(config))
    changes: Dict[str, Any] = {}
    for key, text in pairs:
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}' (known: {', '.join(sorted(fields))})")
        try:
            changes[key] = _parse_value(fields[key], hints[key], text)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}': {e}")
    return dataclasses.replace(config, **changes)  # type: ignore[type-var]


def load_config(
    cls: Type[C],
    path: Optional[str] = None,
    overrides: Sequence[Tuple[str, str]] = (),
) -> C:
    config = cls()
    if path:
        with open(path, 'r', encoding='utf8') as handle:
            config = apply_pairs(config, parse_lines(handle, path))
    return apply_pairs(config, overrides)


def render_config(config: Any) -> str:
    """Canonical rendering: sorted ``key = value`` lines."""
    lines = []
    for f in sorted(dataclasses.fields(config), key=lambda f: f.name):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = 'true' if value else 'false'
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f'{f.name} = {text}')
    return '\n'.join(lines) + '\n'


def config_hash(config: Any) -> str:
    return hashlib.sha256(render_config(config).encode('utf8')).hexdigest()


def worker_count() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            count = int(value)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{value}'")
        if count < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1, got {count}")
        return count
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Ordered map over a thread pool capped by ``SSD_THREADS``."""
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
