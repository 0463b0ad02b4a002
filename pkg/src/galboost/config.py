"""Sectioned ``key = value`` run configuration with strict key checking.

Every key has a typed default; unknown sections or keys are errors that
carry the offending line number. ``RunConfig.echo()`` renders the fully
resolved configuration so an output directory documents its own run.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

from .core import ValidationError


def _floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict = {
    "model": {
        "mass": (float, 1.0),
        "omega": (float, 1.0),
        "R0": (float, 0.0),
        "gamma": (float, 0.05),
        "omega_c": (float, 10.0),
        "omega_max": (float, 80.0),
        "kT": (float, 10.0),
        "n_modes": (int, 1024),
    },
    "grid": {
        "t_max": (float, 40.0),
        "dt": (float, 0.005),
        "window_start": (float, 5.0),
        "window_end": (float, 40.0),
    },
    "run": {
        "scenario": (str, "reference"),  # free-form tag copied into summary.json
        "seed": (int, 0),
        "check": (str, "energy"),
    },
    "state": {
        "q0": (float, 1.0),
        "p0": (float, 0.0),
    },
    "boost": {
        "u": (_floats, (0.05, 0.1)),
        "tolerance": (float, 0.01),
    },
    "translation": {
        "a": (_floats, (0.5, 3.0)),
    },
    "timeshift": {
        "tau": (float, 0.5),
        "t_max": (float, 10.0),
        "window_start": (float, 5.0),
    },
    "scan": {
        "gammas": (_floats, (0.0, 0.0125, 0.025, 0.05, 0.1)),
        "u": (_floats, (0.05, 0.1)),
        "n_modes": (int, 1024),
        "t_max": (float, 40.0),
        "window_start": (float, 5.0),
    },
    "fom": {
        "gamma_hz": (float, 1e3),
        "temp_k": (float, 300.0),
        "defaults": (_bool, True),
    },
    "thresholds": {
        "gamma_hz": (float, 1e4),
        "temp_k": (float, 1e-6),
        "omega_hz": (float, 1e5),
    },
    "fdt": {
        "fault_scale": (float, 1.1),
    },
    "unravel": {
        "mode": (str, "gate"),
        "n_traj": (int, 10000),
        "batch_size": (int, 100),
        "n_modes": (int, 256),
        "x_min": (float, -12.0),
        "x_max": (float, 12.0),
        "n_points": (int, 256),
        "dt": (float, 0.01),
        "t_max": (float, 3.0),
        "lam": (float, 0.7),
        "static": (str, "noise"),
        "a2": (float, 1.0),
        "a4": (float, 0.0),
        "u": (_floats, (0.5, 1.0)),
        "window_start": (float, 0.5),
        "n_samples": (int, 20),
    },
}


def _render(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _line_of(lines: list, section: str, key: Optional[str]) -> int:
    cur = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
            if key is None and cur == section:
                return i
            continue
        if key is not None and cur == section and "=" in s:
            if s.split("=", 1)[0].strip() == key:
                return i
    return 0


@dataclass(frozen=True)
class RunConfig:
    values: dict  # section -> key -> value
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_overrides(self, **sections) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for s, kv in sections.items():
            for k, v in kv.items():
                if s not in SCHEMA or k not in SCHEMA[s]:
                    raise ValidationError(f"unknown config key [{s}] {k}")
                vals[s][k] = v
        return RunConfig(vals, self.source)

    def echo(self) -> str:
        out = io.StringIO()
        out.write(f"# resolved configuration (source: {self.source})\n")
        for s in SCHEMA:
            out.write(f"\n[{s}]\n")
            for k in SCHEMA[s]:
                out.write(f"{k} = {_render(self.values[s][k])}\n")
        return out.getvalue()


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in kv.items()} for s, kv in SCHEMA.items()})


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    lines = text.splitlines()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keys are case sensitive (R0)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: {exc}") from None
    vals = defaults().values
    for section in cp.sections():
        if section not in SCHEMA:
            ln = _line_of(lines, section, None)
            raise ValidationError(f"{source}:{ln}: unknown section [{section}]")
        for key, raw in cp.items(section):
            ln = _line_of(lines, section, key)
            if key not in SCHEMA[section]:
                raise ValidationError(f"{source}:{ln}: unknown key '{key}' in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                vals[section][key] = conv(raw)
            except ValueError as exc:
                raise ValidationError(f"{source}:{ln}: bad value for '{key}': {exc}") from None
    return RunConfig(vals, source)


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return defaults()
    p = Path(path)
    return parse_config(p.read_text(), str(p))
