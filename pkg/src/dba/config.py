"""Flat ``key = value`` run configuration shared by the CLI subcommands."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ParameterError

SEED_ENV = "DBA_SEED"


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


@dataclass
class RunConfig:
    mechanism: str | None = None
    n: tuple[int, ...] | None = None
    d: int | None = None
    d_p: int | None = None
    d_in: int | None = None
    heads: int | None = None
    seed: int | None = None
    reps: int | None = None
    epochs: int | None = None
    task: str | None = None
    out_path: str | None = None

    def merged(self, other: "RunConfig") -> "RunConfig":
        """``other`` wins wherever it is set."""
        return RunConfig(**{f.name: getattr(other, f.name) if getattr(other, f.name) is not None
                            else getattr(self, f.name) for f in fields(self)})

    def get(self, name, default):
        value = getattr(self, name)
        return default if value is None else value

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError as exc:
                raise ParameterError(f"{SEED_ENV}={env!r} is not an integer") from exc
        return 0


_CONVERT = {
    "mechanism": str, "n": _int_list, "d": int, "d_p": int, "d_in": int, "heads": int,
    "seed": int, "reps": int, "epochs": int, "task": str, "out_path": str,
}


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def coerce(values: dict) -> RunConfig:
    out = {}
    for key, raw in values.items():
        name = normalize_key(key)
        if name not in _CONVERT:
            raise ParameterError(f"unknown config key {key!r}; allowed: "
                                 + ", ".join(k.replace("_", "-") for k in _CONVERT))
        try:
            out[name] = _CONVERT[name](raw)
        except ValueError as exc:
            raise ParameterError(f"bad value for {key!r}: {raw!r}") from exc
    return RunConfig(**out)


def parse_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return coerce(values)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text)
