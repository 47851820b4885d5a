"""Presets and run configuration.

A preset expands to a complete :class:`PipelineConfig`; a run file (JSON or
YAML) names a preset and overrides any nested field, e.g.::

    preset: desk
    generator: gen.npz
    basis: basis.npz
    pipeline:
      restarts: 4
      csanns: {outer_iters: 6}
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .pipeline import (CsannsConfig, FitConfig, InterpolationSchedule, PipelineConfig,
                       SamplingConfig, SelectionConfig)

WORKSPACE_ENV = "SYNTH2REAL_WORKSPACE"
PRESETS = ("desk", "full")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def preset(name: str) -> PipelineConfig:
    """The complete pipeline configuration for a named preset."""
    if name == "desk":
        return PipelineConfig()
    if name == "full":
        return PipelineConfig(
            sampling=SamplingConfig(n_samples=512),
            csanns=CsannsConfig(outer_iters=96, proposals=512, alpha_lr=None, beta_lr=None,
                                brightness_lr=None),
            fit=FitConfig(steps=1000),
            interpolation=InterpolationSchedule.grid((1, 3, 5, 7)),
            selection=SelectionConfig(resolution=368),
            weights=LossWeights(eval_resolution=256),
            restarts=10,
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


_SECTIONS = {
    "sampling": SamplingConfig,
    "csanns": CsannsConfig,
    "fit": FitConfig,
    "selection": SelectionConfig,
    "weights": LossWeights,
}


def _merge_dataclass(obj, overrides: dict, where: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return dataclasses.replace(obj, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(base: PipelineConfig, overrides: dict | None) -> PipelineConfig:
    """Merge a nested dict of overrides into ``base``."""
    if not overrides:
        return base
    if not isinstance(overrides, dict):
        raise ConfigError("pipeline overrides must be a mapping")
    kw = {}
    for key, value in overrides.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"pipeline.{key} must be a mapping")
            kw[key] = _merge_dataclass(getattr(base, key), value, f"pipeline.{key}")
        elif key == "interpolation":
            if value is None:
                kw[key] = None
            else:
                entries = value["entries"] if isinstance(value, dict) else value
                try:
                    kw[key] = InterpolationSchedule(tuple(tuple(e) for e in entries))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"pipeline.interpolation: {exc}") from exc
        elif key in ("restarts", "seed"):
            kw[key] = int(value)
        else:
            raise ConfigError(f"unknown pipeline field {key!r}")
    try:
        return dataclasses.replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def pipeline_from_dict(d: dict) -> PipelineConfig:
    """Inverse of ``PipelineConfig.to_dict`` (manifest replay)."""
    return apply_overrides(PipelineConfig(), d)


@dataclass(frozen=True)
class RunConfig:
    """Everything ``adapt`` needs besides the input images."""

    generator: str
    basis: str
    preset: str = "desk"
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    output: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run configuration must be a mapping")
        unknown = set(d) - {"generator", "basis", "preset", "pipeline", "output"}
        if unknown:
            raise ConfigError(f"unknown run field(s): {', '.join(sorted(unknown))}")
        for required in ("generator", "basis"):
            if required not in d:
                raise ConfigError(f"run configuration needs {required!r}")
        name = d.get("preset", "desk")
        pipe = apply_overrides(preset(name), d.get("pipeline"))
        return cls(str(d["generator"]), str(d["basis"]), name, pipe, str(d.get("output", "out")))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "basis": self.basis,
            "preset": self.preset,
            "pipeline": self.pipeline.to_dict(),
            "output": self.output,
        }


def workspace_root(explicit: str | os.PathLike | None = None) -> Path:
    """Explicit path, else ``$SYNTH2REAL_WORKSPACE``, else the current directory."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(WORKSPACE_ENV)
    return Path(env) if env else Path.cwd()


def resolve(root: Path, path: str | os.PathLike) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p
