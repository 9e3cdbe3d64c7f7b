"""Experiment configuration files.

INI-style text, ``key = value`` lines grouped under ``[train]``, ``[net]``,
``[diffusion]`` and ``[sampler]`` sections.  Values are coerced to the type
of the matching dataclass field; command-line flags override file values.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from pathlib import Path

from .diffusion import DiffusionConfig
from .errors import UsageError
from .samplers import SamplerConfig
from .scorenet import NetConfig
from .training import TrainConfig

SECTIONS = {"train": TrainConfig, "net": NetConfig, "diffusion": DiffusionConfig, "sampler": SamplerConfig}
_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) if v.strip() not in ("inf", "+inf") else math.inf
                         for v in text.strip("()").split(","))
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {name}") from None
    return text


def read_config(path) -> dict:
    """Section -> {field: typed value} for every key present in the file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(Path(path)) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        values = {}
        for key, raw in parser.items(section):
            name = key.replace("-", "_")
            if name not in fields:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            default = getattr(SECTIONS[section](), name)
            values[name] = _coerce(raw, default, f"{section}.{key}")
        out[section] = values
    return out


def build(section: str, file_values: dict | None = None, overrides: dict | None = None, **base):
    """Instantiate a section's dataclass from defaults < ``base`` < file < overrides (non-None)."""
    values = dict(base)
    values.update((file_values or {}).get(section, {}))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return SECTIONS[section](**values)


def write_config(path, **sections):
    """Write dataclass instances as a config file (one section each)."""
    parser = configparser.ConfigParser()
    for name, obj in sections.items():
        parser[name] = {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
                        for k, v in dataclasses.asdict(obj).items()}
    with open(path, "w") as fh:
        parser.write(fh)
