"""Flat ``key = value`` run configuration.

One file drives a whole run: model shape, cascade settings, optimiser
schedule, inference limits and the synthetic data recipe.  Every key is
typed; unknown keys and malformed values are reported with their line
number.  ``#`` starts a comment.  Sequences use bracket syntax
(``stc_levels = [2, 3]``, ``levels = [(2, 4), (3, 8)]``) and an empty
bracket pair means "none".
"""
from __future__ import annotations

import ast
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cascade import CascadeConfig, InferenceConfig
from .netarch import ModelConfig
from .synthdata import DEFAULT_ASPECTS, SCALE_MIXES
from .trainloop import TrainConfig


class ConfigError(ValueError):
    """Raised for unreadable, malformed or unknown configuration entries."""


@dataclass
class DataConfig:
    train_seed: int = 0
    train_scenes: int = 500
    eval_seed: int = 1_000_000
    eval_scenes: int = 100
    image_size: int = 128
    scale_mix: str = "mixed"
    aspect_mix: tuple[float, ...] = DEFAULT_ASPECTS

    def __post_init__(self):
        self.aspect_mix = tuple(float(a) for a in self.aspect_mix)
        if self.scale_mix not in SCALE_MIXES:
            raise ValueError(f"scale_mix must be one of {sorted(SCALE_MIXES)}, got {self.scale_mix!r}")
        if not self.aspect_mix or min(self.aspect_mix) <= 0:
            raise ValueError("aspect_mix needs at least one positive ratio")
        if self.train_scenes < 0 or self.eval_scenes < 0:
            raise ValueError("scene counts must be non-negative")


# keys owned by the module toggles rather than exposed directly
_HIDDEN = {"rfe_enabled", "fsm_enabled", "sml_enabled"}
_SECTIONS = (("model", ModelConfig), ("cascade", CascadeConfig), ("train", TrainConfig),
             ("inference", InferenceConfig), ("data", DataConfig))


def _build_index() -> dict[str, tuple[str, typing.Any]]:
    index: dict[str, tuple[str, typing.Any]] = {}
    for section, cls in _SECTIONS:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name in _HIDDEN:
                continue
            if f.name in index:
                raise RuntimeError(f"duplicate configuration key {f.name}")
            index[f.name] = (section, hints[f.name])
    return index


KEYS = _build_index()


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(value, hint):
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            value = (value,)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if len(args) != len(value):
            raise ValueError(f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a) for v, a in zip(value, args))
    if hint is bool:
        if isinstance(value, bool):
            return value
        return _parse_bool(str(value))
    if hint is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    raise ValueError(f"unsupported type {hint}")


def parse_value(key: str, text: str):
    """Typed value for ``key`` from its textual form."""
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}")
    hint = KEYS[key][1]
    text = text.strip()
    if hint is str:
        return text
    if hint is bool:
        return _parse_bool(text)
    try:
        literal = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ValueError(f"cannot parse {text!r}") from None
    return _coerce(literal, hint)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "[" + ", ".join(_format_item(v) for v in value) + "]"
    return _format_item(value)


def _format_item(v) -> str:
    if isinstance(v, tuple):
        return "(" + ", ".join(_format_item(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def get(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        return getattr(getattr(self, KEYS[key][0]), key)

    def as_dict(self) -> dict[str, typing.Any]:
        return {k: self.get(k) for k in KEYS}

    def with_values(self, values: dict[str, typing.Any]) -> "RunConfig":
        """Copy with ``values`` applied; each section is re-validated."""
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        sections = {}
        for name, _ in _SECTIONS:
            changes = {k: v for k, v in values.items() if KEYS[k][0] == name}
            current = getattr(self, name)
            sections[name] = dataclasses.replace(current, **changes) if changes else current
        return RunConfig(**sections)

    def dumps(self) -> str:
        out = []
        for name, _ in _SECTIONS:
            out.append(f"# {name}")
            out.extend(f"{k} = {format_value(self.get(k))}" for k in KEYS if KEYS[k][0] == name)
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def loads(text: str, source: str = "<config>") -> RunConfig:
    """Parse configuration text; every problem is reported, each with its line."""
    values: dict[str, typing.Any] = {}
    errors: list[str] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in KEYS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
            continue
        seen[key] = lineno
        try:
            values[key] = parse_value(key, val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {key}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    try:
        return RunConfig().with_values(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
    return loads(text, str(p))


def apply_overrides(cfg: RunConfig, overrides: typing.Iterable[str]) -> RunConfig:
    """Apply ``KEY=VALUE`` strings on top of ``cfg``."""
    values = {}
    for item in overrides:
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        try:
            values[key] = parse_value(key, val)
        except ValueError as exc:
            raise ConfigError(f"override {key}: {exc}") from None
    try:
        return cfg.with_values(values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"override: {exc}") from None
