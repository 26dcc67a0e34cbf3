"""Run configuration: a single YAML document with per-stage sections.

Every field is validated with a message naming the offending key; unknown
keys are rejected.  Command-line flags override file values; precedence is
flags > config file > built-in defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .vae import ARCH_PRESETS

__all__ = [
    "ConfigError",
    "SynthSection",
    "Phase1Section",
    "Phase2Section",
    "ScoreSection",
    "RunConfig",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


def _check(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _number(value, key, *, positive=False, nonnegative=False):
    _check(isinstance(value, (int, float)) and not isinstance(value, bool), key,
           f"expected a number, got {value!r}")
    if positive:
        _check(value > 0, key, f"must be positive, got {value!r}")
    if nonnegative:
        _check(value >= 0, key, f"must be nonnegative, got {value!r}")
    return float(value)


def _integer(value, key, *, minimum=None):
    _check(isinstance(value, int) and not isinstance(value, bool), key,
           f"expected an integer, got {value!r}")
    if minimum is not None:
        _check(value >= minimum, key, f"must be >= {minimum}, got {value!r}")
    return int(value)


def _choice(value, key, options):
    _check(value in options, key, f"must be one of {sorted(options)}, got {value!r}")
    return value


@dataclass
class SynthSection:
    n: int = 500
    ambient_dim: int = 20
    r0: float = 1.0
    spread: float = 1.0
    twist: float = 1.0
    group_size: int = 70
    similarity_threshold: float = 0.2

    def validate(self, prefix="synth"):
        _integer(self.n, f"{prefix}.n", minimum=1)
        _integer(self.ambient_dim, f"{prefix}.ambient_dim", minimum=3)
        _number(self.r0, f"{prefix}.r0", positive=True)
        _number(self.spread, f"{prefix}.spread", positive=True)
        _number(self.twist, f"{prefix}.twist", positive=True)
        _integer(self.group_size, f"{prefix}.group_size", minimum=1)
        _check(self.group_size <= self.n, f"{prefix}.group_size",
               f"cannot exceed n={self.n}")
        _number(self.similarity_threshold, f"{prefix}.similarity_threshold", nonnegative=True)
        _check(self.similarity_threshold < 1, f"{prefix}.similarity_threshold",
               "must be below 1")


@dataclass
class Phase1Section:
    preset: str | None = "synthetic-table2"
    latent_dim: int = 2
    encoder_hidden: list | None = None
    decoder_hidden: list | None = None
    activation: str | None = None
    epochs: int = 1500
    learning_rate: float = 5e-3
    lambda_var: float = 1.0
    lambda_resid: float = 1.0
    anneal_kind: str = "sigmoid"
    anneal_start: float = 0.0
    anneal_end: float = 2.0
    anneal_steps: int | None = None
    dropout: float = 0.2

    def validate(self, prefix="phase1"):
        if self.preset is not None:
            _choice(self.preset, f"{prefix}.preset", set(ARCH_PRESETS) | {"none"})
        else:
            _check(self.encoder_hidden and self.decoder_hidden and self.activation,
                   f"{prefix}.preset",
                   "without a preset, encoder_hidden, decoder_hidden and activation are required")
        for key in ("encoder_hidden", "decoder_hidden"):
            val = getattr(self, key)
            if val is not None:
                _check(isinstance(val, (list, tuple)) and val
                       and all(isinstance(h, int) and h > 0 for h in val),
                       f"{prefix}.{key}", f"expected a list of positive integers, got {val!r}")
        if self.activation is not None:
            _choice(self.activation, f"{prefix}.activation",
                    {"ELU", "ReLU", "Softplus", "Tanh", "Identity"})
        _integer(self.latent_dim, f"{prefix}.latent_dim", minimum=1)
        _integer(self.epochs, f"{prefix}.epochs", minimum=0)
        _number(self.learning_rate, f"{prefix}.learning_rate", positive=True)
        _number(self.lambda_var, f"{prefix}.lambda_var", nonnegative=True)
        _number(self.lambda_resid, f"{prefix}.lambda_resid", nonnegative=True)
        _choice(self.anneal_kind, f"{prefix}.anneal_kind", {"linear", "sigmoid"})
        _number(self.anneal_start, f"{prefix}.anneal_start", nonnegative=True)
        _number(self.anneal_end, f"{prefix}.anneal_end", nonnegative=True)
        if self.anneal_steps is not None:
            _integer(self.anneal_steps, f"{prefix}.anneal_steps", minimum=1)
        _number(self.dropout, f"{prefix}.dropout", nonnegative=True)
        _check(self.dropout < 1, f"{prefix}.dropout", "must be below 1")


@dataclass
class Phase2Section:
    estimator: str = "grid"
    epochs: int = 400
    learning_rate: float = 1e-3
    pairs_per_step: int = 256
    grid_resolution: int = 64
    connectivity: str = "axis+diagonal"
    linear_steps: int = 32
    heat_times: int = 15
    kernel_scale: str = "learned"
    bounds_margin: float = 0.1

    def validate(self, prefix="phase2"):
        _choice(self.estimator, f"{prefix}.estimator", {"grid", "linear"})
        _integer(self.epochs, f"{prefix}.epochs", minimum=0)
        _number(self.learning_rate, f"{prefix}.learning_rate", positive=True)
        _integer(self.pairs_per_step, f"{prefix}.pairs_per_step", minimum=1)
        _integer(self.grid_resolution, f"{prefix}.grid_resolution", minimum=2)
        _choice(self.connectivity, f"{prefix}.connectivity", {"axis", "axis+diagonal"})
        _integer(self.linear_steps, f"{prefix}.linear_steps", minimum=2)
        _integer(self.heat_times, f"{prefix}.heat_times", minimum=2)
        _choice(self.kernel_scale, f"{prefix}.kernel_scale", {"learned", "fixed"})
        _number(self.bounds_margin, f"{prefix}.bounds_margin", positive=True)


@dataclass
class ScoreSection:
    eps: float = 1e-12
    pair_set: str = "all"

    def validate(self, prefix="score"):
        _number(self.eps, f"{prefix}.eps", positive=True)
        _choice(self.pair_set, f"{prefix}.pair_set", {"all", "edges"})


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str | None = None
    threads: int | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    phase1: Phase1Section = field(default_factory=Phase1Section)
    phase2: Phase2Section = field(default_factory=Phase2Section)
    score: ScoreSection = field(default_factory=ScoreSection)

    def validate(self):
        _integer(self.seed, "seed", minimum=0)
        if self.threads is not None:
            _integer(self.threads, "threads", minimum=1)
        self.synth.validate()
        self.phase1.validate()
        self.phase2.validate()
        self.score.validate()
        return self

    def echo(self) -> dict:
        def section(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}

        return {
            "seed": self.seed,
            "output_root": self.output_root,
            "threads": self.threads,
            "synth": section(self.synth),
            "phase1": section(self.phase1),
            "phase2": section(self.phase2),
            "score": section(self.score),
        }


def _build_section(cls, data: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{prefix}.{key}: unknown configuration field")
    kwargs = dict(data)
    if "preset" in kwargs and kwargs["preset"] == "none":
        kwargs["preset"] = None
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML config file (optional) and apply flat overrides like
    {'phase2.estimator': 'linear'}; validates every field."""
    data: dict = {}
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root: expected a mapping, got {type(loaded).__name__}")
        data = loaded
    sections = {"synth": SynthSection, "phase1": Phase1Section,
                "phase2": Phase2Section, "score": ScoreSection}
    top_known = {"seed", "output_root", "threads", *sections}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration field")
    cfg = RunConfig(
        seed=data.get("seed", 0),
        output_root=data.get("output_root"),
        threads=data.get("threads"),
        **{
            name: _build_section(cls, data.get(name, {}) or {}, name)
            for name, cls in sections.items()
        },
    )
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        parts = dotted.split(".")
        target = cfg
        for part in parts[:-1]:
            target = getattr(target, part)
        if not hasattr(target, parts[-1]):
            raise ConfigError(f"{dotted}: unknown configuration field")
        setattr(target, parts[-1], value)
    return cfg.validate()
