"""Run configuration: one TOML file per run, optionally overridden by flags.

Example::

    seed = 7
    airport = "A"

    [paths]
    scenes = "out/scenes.bin"

    [model]
    d = 32
    variant = "agent_aware"

    [plan]
    task = "trajectory"
    epochs = 10
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSettings:
    family_seed: int = 0
    days: int = 2
    operating_hours: tuple[int, int] | None = None
    arrival_rate: float | None = None


@dataclass(frozen=True)
class PreprocessSettings:
    dt: float = 10.0
    t_max: int = 60
    cutoff_nm: float = 70.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    airport_ref: tuple[float, float] | None = None  # default: the family airport's reference


@dataclass(frozen=True)
class PlanSettings:
    task: str = "trajectory"
    epochs: int | None = None  # None: reference value for the mode/task
    lr: float | None = None
    batch_size: int = 8
    data_fraction: float = 1.0
    mask_steps: int = 12
    fixed_masks: bool = False


@dataclass(frozen=True)
class PathSettings:
    tracks: str | None = None
    scenes: str | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    out: str = "out"
    airport: str = "A"
    method: str | None = None  # column label in reports; default from the model variant
    paths: PathSettings = PathSettings()
    synth: SynthSettings = SynthSettings()
    preprocess: PreprocessSettings = PreprocessSettings()
    model: ModelConfig = ModelConfig()
    model_given: bool = False
    plan: PlanSettings = PlanSettings()
    fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    period: str = "day"
    source: str = field(default="", compare=False)

    @property
    def method_label(self) -> str:
        if self.method:
            return self.method
        return "MA-BERT" if self.model.variant == "agent_aware" else "BERT"

    def to_dict(self) -> dict:
        """Everything that influences results (output location excluded)."""
        return {
            "seed": self.seed,
            "airport": self.airport,
            "method": self.method_label,
            "synth": _plain(self.synth),
            "preprocess": _plain(self.preprocess),
            "model": self.model.to_dict(),
            "plan": _plain(self.plan),
            "fractions": list(self.fractions),
            "period": self.period,
        }


def _plain(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


_TOP = {"seed", "out", "airport", "method", "fractions", "period"}
_SECTIONS = {
    "paths": PathSettings,
    "synth": SynthSettings,
    "preprocess": PreprocessSettings,
    "model": ModelConfig,
    "plan": PlanSettings,
}


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Best-effort line number of ``key`` inside ``[section]`` (None = top level)."""
    current = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            continue
        if current == section and pat.match(line):
            return i
    return None


def _fail(source: str, text: str, section: str | None, key: str, msg: str):
    where = f"{section}.{key}" if section else key
    line = _key_line(text, section, key)
    loc = f"{source}:{line}" if line else source
    raise ConfigError(f"{loc}: key '{where}': {msg}")


def _kind(annotation: str) -> str:
    for kind in ("bool", "tuple", "float", "int", "str"):
        if kind in annotation:
            return kind
    raise AssertionError(annotation)


def _coerce(value, kind: str):
    """Check ``value`` against a field kind derived from its annotation."""
    if kind == "bool":
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if isinstance(value, bool):
        raise TypeError("expected a number or string, got a boolean")
    if kind == "int":
        if not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if kind == "tuple":
        if not isinstance(value, list) or len(value) != 2 or not all(isinstance(v, (int, float)) for v in value):
            raise TypeError("expected a two-element array of numbers")
        return tuple(value)
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: malformed TOML: {exc}") from exc

    kw: dict = {"source": source}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                _fail(source, text, None, key, "expected a [table]")
            continue
        if key not in _TOP:
            _fail(source, text, None, key, "unknown key")
        try:
            if key == "seed":
                if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
                    raise TypeError("expected an unsigned 64-bit integer")
            elif key == "fractions":
                if not isinstance(value, list) or not value:
                    raise TypeError("expected a non-empty array of numbers")
                value = tuple(float(v) for v in value)
                if any(not 0.0 < v <= 1.0 for v in value):
                    raise ValueError("fractions must lie in (0, 1]")
            elif not isinstance(value, str):
                raise TypeError(f"expected a string, got {value!r}")
            elif key == "period" and value not in ("day", "week", "month"):
                raise ValueError("expected one of day, week, month")
        except (TypeError, ValueError) as exc:
            _fail(source, text, None, key, str(exc))
        kw[key] = value

    for section, cls in _SECTIONS.items():
        table = raw.get(section)
        if table is None:
            continue
        kinds = {f.name: _kind(str(f.type)) for f in fields(cls)}
        args = {}
        for key, value in table.items():
            if key not in kinds:
                _fail(source, text, section, key, "unknown key")
            try:
                args[key] = _coerce(value, kinds[key])
            except TypeError as exc:
                _fail(source, text, section, key, str(exc))
        try:
            kw[section] = cls(**args)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: section [{section}]: {exc}") from exc
        if section == "model":
            kw["model_given"] = True
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path))
