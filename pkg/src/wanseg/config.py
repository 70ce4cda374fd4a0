"""key=value run configuration files.

One ``key=value`` per line; blank lines and ``#`` comments are ignored. Keys are
the :class:`~wanseg.engine.AdaptConfig` fields plus dataset locations. ``auto``
leaves a mode-dependent field at its default.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .engine import AdaptConfig
from .errors import ContractError

AUTO = "auto"


class ConfigKeyError(ContractError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key


@dataclass
class RunConfig:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    source_manifest: str = ""
    target_manifest: str = ""
    source_eval_split: str = "val"
    target_eval_split: str = "test"


_PATH_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig) if f.name != "adapt")
_ADAPT_TYPES = typing.get_type_hints(AdaptConfig)


def _convert(key: str, raw: str, kind):
    optional = typing.get_origin(kind) is typing.Union
    base = typing.get_args(kind)[0] if optional else kind
    if raw == AUTO:
        if not optional:
            raise ConfigKeyError(key, "does not accept 'auto'")
        return None
    try:
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
    except ValueError:
        raise ConfigKeyError(key, f"cannot parse {raw!r} as {base.__name__}") from None
    return raw


def _format(value) -> str:
    if value is None:
        return AUTO
    return repr(value) if isinstance(value, float) else str(value)


def parse(text: str) -> RunConfig:
    adapt_kw: dict = {}
    path_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigKeyError(key, f"line {lineno} is not key=value")
        if key in adapt_kw or key in path_kw:
            raise ConfigKeyError(key, "given twice")
        if key in _ADAPT_TYPES:
            adapt_kw[key] = _convert(key, raw, _ADAPT_TYPES[key])
        elif key in _PATH_KEYS:
            path_kw[key] = raw
        else:
            raise ConfigKeyError(key, "unknown key")
    return RunConfig(AdaptConfig(**adapt_kw), **path_kw)


def serialize(config: RunConfig) -> str:
    lines = [f"{k}={_format(v)}" for k, v in dataclasses.asdict(config.adapt).items()]
    lines += [f"{k}={getattr(config, k)}" for k in _PATH_KEYS]
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def dump(config: RunConfig, path) -> None:
    Path(path).write_text(serialize(config), encoding="utf-8")


def resolve_path(value: str, base: Optional[Path]) -> Path:
    """Relative dataset paths are taken relative to the config file's directory."""
    p = Path(value)
    return p if p.is_absolute() or base is None else base / p
