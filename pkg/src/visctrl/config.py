"""Flat ``key = value`` run configuration files.

Blank lines and lines starting with ``#`` are ignored (there are no
trailing comments, so values may contain ``#``); every key must be known to the
command's schema and may appear once.  Relative paths resolve against the
config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError, IOFailure

REQUIRED = object()


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _path_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _prompt_list(text: str) -> list[str]:
    return [x.strip() for x in text.split("|")]


def _optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = REQUIRED
    path: bool = False  # resolved against the config file's directory; must exist
    render: Callable[[Any], str] | None = None


INT, FLOAT, STR, BOOL = int, float, str, _bool
INT_LIST, PATH_LIST, PROMPT_LIST, OPT_INT = _int_list, _path_list, _prompt_list, _optional_int


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def render_prompts(value) -> str:
    return " | ".join(value)


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]
    raw: dict[str, str]
    base_dir: Path
    schema: dict[str, Key]

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.base_dir / p

    def paths(self, key: str) -> list[Path]:
        out = []
        for item in self.values[key]:
            p = Path(item)
            out.append(p if p.is_absolute() else self.base_dir / p)
        return out

    def echo(self) -> list[str]:
        """Fully resolved settings as ``config.key=value`` lines, sorted by key."""
        return [f"config.{k}={render(self.schema, k, self.values[k])}" for k in sorted(self.values)]


def parse_text(text: str, schema: dict[str, Key], command: str, base_dir: Path) -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r} for command {command!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value

    values: dict[str, Any] = {}
    for key, spec in schema.items():
        if key not in raw:
            if spec.default is REQUIRED:
                raise ConfigError(f"missing required key {key!r}")
            values[key] = spec.default
            continue
        try:
            values[key] = spec.parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: {exc}") from None
    cfg = RunConfig(command, values, raw, base_dir, schema)
    _validate_paths(cfg, schema)
    return cfg


def _validate_paths(cfg: RunConfig, schema: dict[str, Key]) -> None:
    for key, spec in schema.items():
        if not spec.path or cfg.values[key] in (None, [], ""):
            continue
        targets = cfg.paths(key) if isinstance(cfg.values[key], list) else [cfg.path(key)]
        for p in targets:
            if not p.exists():
                raise ConfigError(f"key {key!r}: path does not exist: {p}")


def load(path, schema: dict[str, Key], command: str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, schema, command, path.parent)


def render(schema: dict[str, Key], key: str, value) -> str:
    spec = schema.get(key)
    if spec is not None and spec.render is not None:
        return spec.render(value)
    return _render(value)


def dump(values: dict[str, Any], schema: dict[str, Key]) -> str:
    """Serialise values back to the file format (sorted keys)."""
    return "".join(f"{k} = {render(schema, k, values[k])}\n" for k in sorted(values))
