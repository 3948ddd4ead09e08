"""Experiment configs: presets, schema validation and loading.

A config is one YAML (or JSON) mapping. Every key must appear in the preset
of the chosen experiment; values are type-checked against the preset value.
Keys omitted from the file take the preset value.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

import yaml

from ..errors import ConfigInvalid, IoError

SCHEMA_VERSION = 1
EXPERIMENTS = ("gpmpc-quad", "safe-explore-cartpole", "mpsc-cartpole", "custom")
SECTIONS = ("environment", "controller", "filter", "learner")

_GPMPC = {
    "seeds": list(range(10)),
    "episode_length": 120,
    "environment": {
        "dt": 0.05,
        "prior_factor": 1.5,
        "x0": [-1.0, 0.0, -1.0, 0.0, 0.0, 0.0],
        "x0_jitter": [0.1, 0.0, 0.1, 0.0, 0.0, 0.0],
        "diagonal_limit": 0.2,
        "state_bound": [2.0, 2.0, 2.0, 2.0, 0.8, 8.0],
        "disturbance_bound": [0.0, 0.05, 0.0, 0.05, 0.0, 1.0],
    },
    "controller": {
        "horizon": 20,
        "Q": [10.0, 1.0, 10.0, 1.0, 0.1, 0.01],
        "R": [0.5 / 0.3 ** 2, 0.5 / 2e-4 ** 2],
        "confidence": 0.95,
        "residual_dims": [0, 1, 2, 3, 4, 5],
        "include_noise": True,
    },
    "filter": {},
    "learner": {
        "gp_samples": 800,
        "data_steps": 2400,
        "data_episode_length": 100,
        "data_region": [1.5, 1.0, 1.5, 1.0, 0.3, 1.0],
        "data_reset_bound": [3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
        "excitation_noise": [0.1, 1e-4],
        "hyperopt_iterations": 40,
        "hyperopt_seed": 0,
    },
}

_MPSC = {
    "seeds": list(range(10)),
    "episode_length": 200,
    "environment": {
        "dt": 0.05,
        "state_bound": [1.0, 1.0, 0.1, 0.6],
        "input_bound": 5.0,
        "disturbance_bound": [0.0, 0.02, 0.0, 0.02],
        "x0_low": [0.4, 0.0, -0.02, 0.0],
        "x0_high": [0.6, 0.0, 0.02, 0.0],
        "linearization_samples": 20000,
        "linearization_inflation": 1.2,
    },
    "controller": {"Q": [100.0, 10.0, 1.0, 0.1], "R": [0.1]},
    "filter": {"horizon": 20, "Q": [10.0, 1.0, 100.0, 1.0], "R": [1.0], "free_dims": [0]},
    "learner": {},
}

_SAFE_EXPLORE = {
    "seeds": list(range(10)),
    "episode_length": 100,
    "environment": {
        "dt": 0.05,
        "position_limit": 1.0,
        "action_scale": 10.0,
        "state_weights": [1.0, 0.1, 1.0, 0.1],
        "input_weight": 0.001,
        "stage_cost_cap": 1.0,
        "violation_cost": 100.0,
        "reset_bound": [0.8, 1.0, 0.15, 0.3],
    },
    "controller": {},
    "filter": {
        "arms": ["ppo", "shaping", "safety-layer"],
        "shaping_weight": 20.0,
        "shaping_margin": 0.3,
        "layer_eps": [0.01, 0.05, 0.1],
        "layer_primary_eps": 0.05,
        "layer_samples": 2000,
        "layer_lookahead": 0.3,
        "layer_sample_bound": [1.0, 1.0, 0.3, 1.0],
    },
    "learner": {
        "iterations": 100,
        "steps_per_iteration": 2000,
        "lr": 3e-3,
        "value_lr": 3e-3,
        "epochs": 5,
        "minibatch": 250,
        "clip": 0.2,
        "gamma": 0.99,
        "lam": 0.95,
        "hidden": [32, 32],
        "log_std": -0.5,
        "final_window": 10,
        "eval_episodes": 100,
        "eval_logged": 5,
    },
}

_CUSTOM = {
    "seeds": [0],
    "episode_length": 100,
    "environment": {
        "system": "double-integrator",
        "dt": 0.1,
        "state_bound": [1.0, 1.0],
        "input_bound": 1.0,
        "disturbance_bound": [0.0, 0.0],
        "x0_low": [-0.5, -0.2],
        "x0_high": [0.5, 0.2],
        "episodes": 1,
    },
    "controller": {"kind": "lqr", "horizon": 10, "Q": [1.0, 1.0], "R": [1.0]},
    "filter": {"kind": "none", "tau": 0.5, "alpha": 1.0, "position_limit": 1.0},
    "learner": {"kind": "controller", "value": [0.0], "noise": 0.0},
}

PRESETS: Dict[str, dict] = {
    "gpmpc-quad": _GPMPC,
    "mpsc-cartpole": _MPSC,
    "safe-explore-cartpole": _SAFE_EXPLORE,
    "custom": _CUSTOM,
}

# Paths whose preset values are taken from the source experiments; all others
# are labeled as stand-in defaults in the emitted metadata.
SOURCE_VALUES = {
    "gpmpc-quad": ("environment.prior_factor", "controller.confidence", "learner.gp_samples", "seeds"),
    "safe-explore-cartpole": ("seeds",),
    "mpsc-cartpole": (),
    "custom": (),
}

CHOICES = {
    "environment.system": ("double-integrator", "cartpole"),
    "controller.kind": ("lqr", "mpc", "tube-mpc"),
    "filter.kind": ("none", "cbf", "mpsc"),
    "filter.arms": ("ppo", "shaping", "safety-layer"),
    "learner.kind": ("controller", "constant"),
}


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: Tuple[int, ...]
    episode_length: int
    output_dir: str = "runs"
    environment: Dict[str, Any] = field(default_factory=dict)
    controller: Dict[str, Any] = field(default_factory=dict)
    filter: Dict[str, Any] = field(default_factory=dict)
    learner: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment,
                "seeds": list(self.seeds), "episode_length": self.episode_length,
                "output_dir": self.output_dir,
                **{s: copy.deepcopy(getattr(self, s)) for s in SECTIONS}}

    def with_seeds(self, seeds) -> "ExperimentConfig":
        d = self.to_dict()
        d["seeds"] = list(seeds)
        return validate(d)

    def value_labels(self) -> dict:
        """Split the flattened config into values from the source experiments and stand-in defaults."""
        flat = _flatten(self.to_dict())
        source = SOURCE_VALUES[self.experiment]
        skip = ("schema_version", "experiment", "output_dir")
        return {"paper_values": {k: v for k, v in flat.items() if k in source},
                "non_paper_defaults": {k: v for k, v in flat.items() if k not in source and k not in skip}}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def _check_value(value, ref, path):
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid("expected a boolean", path)
        return value
    if isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid("expected an integer", path)
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid("expected a number", path)
        return float(value)
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigInvalid("expected a string", path)
        if path in CHOICES and value not in CHOICES[path]:
            raise ConfigInvalid(f"must be one of {list(CHOICES[path])}, got {value!r}", path)
        return value
    if isinstance(ref, list):
        if not isinstance(value, list):
            raise ConfigInvalid("expected a list", path)
        if path in CHOICES:
            bad = [v for v in value if v not in CHOICES[path]]
            if bad:
                raise ConfigInvalid(f"unknown entries {bad}; allowed {list(CHOICES[path])}", path)
            return list(value)
        item = ref[0] if ref else 0.0
        return [_check_value(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    raise ConfigInvalid("unsupported value", path)


def validate(raw) -> ExperimentConfig:
    """Check ``raw`` against the schema of its experiment and fill in preset values."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigInvalid(f"unsupported schema version {version!r}", "schema_version")
    exp = raw.get("experiment")
    if exp not in PRESETS:
        raise ConfigInvalid(f"must be one of {list(EXPERIMENTS)}, got {exp!r}", "experiment")
    preset = PRESETS[exp]
    top = {"schema_version", "experiment", "seeds", "episode_length", "output_dir", *SECTIONS}
    for key in raw:
        if key not in top:
            raise ConfigInvalid("unknown key", str(key))
    seeds = _check_value(raw.get("seeds", preset["seeds"]), [0], "seeds")
    if not seeds:
        raise ConfigInvalid("at least one seed is required", "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigInvalid("seeds must be distinct", "seeds")
    n = _check_value(raw.get("episode_length", preset["episode_length"]), 0, "episode_length")
    if n < 1:
        raise ConfigInvalid("must be positive", "episode_length")
    out_dir = _check_value(raw.get("output_dir", "runs"), "", "output_dir")
    sections = {}
    for sec in SECTIONS:
        given = raw.get(sec) or {}
        if not isinstance(given, dict):
            raise ConfigInvalid("expected a mapping", sec)
        merged = copy.deepcopy(preset[sec])
        for key, value in given.items():
            path = f"{sec}.{key}"
            if key not in merged:
                raise ConfigInvalid("unknown key", path)
            merged[key] = _check_value(value, preset[sec][key], path)
        sections[sec] = merged
    return ExperimentConfig(exp, tuple(seeds), n, out_dir, **sections)


def preset(name: str, **overrides) -> ExperimentConfig:
    """Validated preset config; ``overrides`` replace top-level keys or whole sections' entries."""
    raw = {"experiment": name}
    for key, value in overrides.items():
        raw[key] = value
    return validate(raw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot parse config: {exc}") from exc
    return validate(raw)
