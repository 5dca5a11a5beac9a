"""Scenario configuration: a line-based ``key = value`` file.

Blank lines are ignored and ``#`` starts a comment that runs to the end of
the line.  Unknown keys are
rejected, and every value is validated before a run starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 5000
    m: int = 500
    d: int = 80
    rho_m: float = 30.0
    boundary: str = "torus"
    hops: int = 0
    mobility_rounds: int = 0
    mobility_step_factor: float = 2.0
    seed: int = 1
    trials: int = 1
    aux_placement: str = "cells"

    def validate(self) -> "ScenarioConfig":
        checks = [
            ("n", self.n >= 1, "must be >= 1"),
            ("m", self.m >= 0, "must be >= 0"),
            ("d", self.d >= 1, "must be >= 1"),
            ("rho_m", self.rho_m > 0, "must be > 0"),
            ("boundary", self.boundary in ("torus", "bounded"), "must be torus or bounded"),
            ("hops", self.hops in (0, 1), "must be 0 or 1"),
            ("mobility_rounds", self.mobility_rounds >= 0, "must be >= 0"),
            ("mobility_step_factor", self.mobility_step_factor >= 0, "must be >= 0"),
            ("seed", 0 <= self.seed < 2**64, "must fit in an unsigned 64-bit integer"),
            ("trials", self.trials >= 1, "must be >= 1"),
            ("aux_placement", self.aux_placement in ("cells", "uniform"), "must be cells or uniform"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"{message} (got {getattr(self, key)!r})", key=key)
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


_TYPES = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}
_CHOICES = {"boundary": ("torus", "bounded"), "aux_placement": ("cells", "uniform")}


def _convert(key: str, raw: str, line: Optional[int]):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind}", key=key, line=line) from None
    allowed = _CHOICES.get(key)
    if allowed and raw not in allowed:
        raise ConfigError(f"must be one of {'|'.join(allowed)} (got {raw!r})", key=key, line=line)
    return raw


def parse_config(text: str, **overrides) -> ScenarioConfig:
    values: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.partition("#")[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line!r}", line=lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _TYPES:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        if not value:
            raise ConfigError("missing value", key=key, line=lineno)
        values[key] = _convert(key, value, lineno)
    for key, value in overrides.items():
        if value is not None:
            values[key] = _convert(key, str(value), None)
    return ScenarioConfig(**values).validate()


def load_config(path, **overrides) -> ScenarioConfig:
    return parse_config(Path(path).read_text(), **overrides)
