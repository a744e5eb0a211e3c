"""Run configuration for the command-line tools.

A run configuration is a JSON object with one section per stage::

    {
      "loss":     {"gamma": 0.85, "alpha": 1.0, ...},
      "pdr":      {"radius": null, "beams": null},
      "gdc":      {"k": 10, "stride": 2, "anchor_strength": "inf", ...},
      "optimize": {"iterations": 500, "step": 0.01, ...},
      "eval":     {"cap": 80.0, "crop": "eigen"},
      "synth":    {"seed": 0, "size": 64, "depth": 10.0}
    }

Every section and key is optional; unknown ones are rejected. Infinite
values may be written as ``"inf"``. ``fusionkit --dump-config`` prints the
full default configuration.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .depthopt import OptimizeConfig
from .exceptions import ParameterError
from .losses import LossConfig

__all__ = [
    "CONFIG_ENV",
    "PDRSettings",
    "GDCSettings",
    "EvalSettings",
    "SynthSettings",
    "RunConfig",
    "load_config",
    "resolve_config_path",
]

CONFIG_ENV = "FUSIONKIT_CONFIG"


def _check_keys(cls, data, section):
    if not isinstance(data, dict):
        raise ParameterError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ParameterError(f"unknown keys in config section {section!r}: {sorted(unknown)}")


def _float(value):
    # JSON has no infinity literal; accept "inf" / "-inf" strings
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError as exc:
            raise ParameterError(f"expected a number, got {value!r}") from exc
    return value


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@dataclass(frozen=True)
class PDRSettings:
    radius: float | None = None
    beams: int | None = None

    def __post_init__(self):
        if self.radius is not None and float(self.radius) < 1:
            raise ParameterError(f"pdr.radius must be >= 1 pixel, got {self.radius}")
        if self.beams is not None and int(self.beams) < 1:
            raise ParameterError(f"pdr.beams must be >= 1, got {self.beams}")


@dataclass(frozen=True)
class GDCSettings:
    k: int = 10
    stride: int = 2
    anchor_strength: float = math.inf
    rcond: float = 1e-3
    ridge: float = 1e-4
    tol: float = 1e-10
    max_iter: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchor_strength", float(_float(self.anchor_strength)))
        if int(self.k) < 1 or int(self.stride) < 1:
            raise ParameterError("gdc.k and gdc.stride must be >= 1")
        if not self.anchor_strength > 0:
            raise ParameterError(f"gdc.anchor_strength must be > 0, got {self.anchor_strength}")
        if self.ridge < 0 or self.tol <= 0:
            raise ParameterError("gdc.ridge must be >= 0 and gdc.tol > 0")


@dataclass(frozen=True)
class EvalSettings:
    cap: float = 80.0
    crop: str | list | None = "eigen"

    def __post_init__(self):
        if not self.cap > 0:
            raise ParameterError(f"eval.cap must be positive, got {self.cap}")
        if isinstance(self.crop, list):
            object.__setattr__(self, "crop", tuple(self.crop))


@dataclass(frozen=True)
class SynthSettings:
    seed: int = 0
    size: int = 64
    depth: float = 10.0

    def __post_init__(self):
        if int(self.size) < 8:
            raise ParameterError(f"synth.size must be >= 8, got {self.size}")
        if not self.depth > 0:
            raise ParameterError(f"synth.depth must be positive, got {self.depth}")


_SECTIONS = {
    "pdr": PDRSettings,
    "gdc": GDCSettings,
    "eval": EvalSettings,
    "synth": SynthSettings,
}


@dataclass(frozen=True)
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    pdr: PDRSettings = field(default_factory=PDRSettings)
    gdc: GDCSettings = field(default_factory=GDCSettings)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ParameterError("config must be a JSON object")
        _check_keys(cls, data, "<root>")
        kwargs = {}
        if "loss" in data:
            _check_keys(LossConfig, data["loss"], "loss")
            kwargs["loss"] = LossConfig(**data["loss"])
        if "optimize" in data:
            opt = dict(data["optimize"]) if isinstance(data["optimize"], dict) else data["optimize"]
            _check_keys(OptimizeConfig, opt, "optimize")
            if "loss" in opt:
                raise ParameterError("loss weights belong in the top-level 'loss' section")
            kwargs["optimize"] = OptimizeConfig(**opt)
        for name, section in _SECTIONS.items():
            if name in data:
                _check_keys(section, data[name], name)
                kwargs[name] = section(**data[name])
        cfg = cls(**kwargs)
        return replace(cfg, optimize=replace(cfg.optimize, loss=cfg.loss))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            if f.name == "optimize":
                section.pop("loss")
            out[f.name] = section
        return _json_safe(out)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def optimizer_config(self) -> OptimizeConfig:
        return replace(self.optimize, loss=self.loss)


def resolve_config_path(path=None):
    """Explicit path first, then ``$FUSIONKIT_CONFIG``, else None."""
    if path:
        return path
    env = os.environ.get(CONFIG_ENV)
    return env or None


def load_config(path=None) -> RunConfig:
    """Load a :class:`RunConfig`; defaults when no path resolves."""
    path = resolve_config_path(path)
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ParameterError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)
