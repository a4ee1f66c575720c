"""Experiment configuration: flat dotted keys loaded from YAML plus overrides.

A config file is a YAML mapping.  Nested mappings are flattened into dotted
keys, so ``train: {lr_critic: 0.01}`` and ``train.lr_critic: 0.01`` are the
same.  Keys are checked against the schema of the chosen experiment and any
unknown key is rejected by name.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .rl.config import TrainConfig, offline_defaults
from .rl.train import baseline_defaults, nonlinear_defaults, online_defaults

KINDS = ("validate-lqr", "bench-timing", "train-online", "train-nonlinear")

_COMMON = {"experiment": None, "seeds": [0], "out": "runs"}
_LQR_ENV = {"env.horizon": 50, "env.m_weight": 1e-3, "env.r_weight": 1.0, "env.noise_std": 0.0}
_SCHEMA = {
    "validate-lqr": {"sizes": [4, 8, 16], **_LQR_ENV},
    "bench-timing": {"sizes": [4, 8, 16, 32, 64, 128], "batch": 256, "horizon": 1,
                     "hidden": [100, 100]},
    "train-online": {"env.n": 4, **_LQR_ENV},
    "train-nonlinear": {"env.horizon": 50, "env.goal": 0.6, "env.reward_var": 0.0025,
                        "env.state_upper": [1.0, 1.0], "env.noise_std": 0.0},
}
_TRAIN_DEFAULTS = {
    "validate-lqr": offline_defaults,
    "train-online": online_defaults,
    "train-nonlinear": nonlinear_defaults,
}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"extra", "seeds"}


def flatten(mapping, prefix="") -> dict:
    out = {}
    for k, v in (mapping or {}).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str):
    """``key=value`` with the value read as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value for {key!r}: {exc}") from exc


def load_file(path) -> dict:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return flatten(data)


@dataclass
class ExperimentConfig:
    kind: str
    seeds: tuple
    out: str
    settings: dict
    train: TrainConfig | None = None
    baseline: TrainConfig | None = None
    raw: dict = field(default_factory=dict)

    def env(self, name, default=None):
        return self.settings.get(f"env.{name}", default)

    def digest(self) -> str:
        """Stable hash of every resolved setting."""
        blob = {"kind": self.kind, "seeds": list(self.seeds), "settings": self.settings,
                "train": self.train.to_dict() if self.train else None,
                "baseline": self.baseline.to_dict() if self.baseline else None}
        text = json.dumps(blob, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()


def _train_config(factory, values: dict, seeds, prefix) -> TrainConfig:
    changes = {}
    for key, v in values.items():
        name = key[len(prefix):]
        if name not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        changes[name] = tuple(v) if isinstance(v, list) else v
    try:
        return factory(seeds=tuple(seeds), **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve(kind: str, values: dict) -> ExperimentConfig:
    """Check ``values`` against the schema of ``kind`` and fill defaults."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    schema = {**_COMMON, **_SCHEMA[kind]}
    train_prefixes = ()
    if kind in _TRAIN_DEFAULTS:
        train_prefixes = ("train.",) + (("baseline.",) if kind == "train-online" else ())
    settings = dict(schema)
    train_vals = {p: {} for p in train_prefixes}
    for key, v in values.items():
        prefix = next((p for p in train_prefixes if key.startswith(p)), None)
        if prefix is not None:
            train_vals[prefix][key] = v
        elif key in schema:
            settings[key] = v
        else:
            raise ConfigError(f"unknown config key: {key}")
    if settings["experiment"] not in (None, kind):
        raise ConfigError(f"config is for {settings['experiment']!r}, not {kind!r}")
    seeds = settings["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    cfg = ExperimentConfig(kind, tuple(seeds), str(settings.pop("out")), settings, raw=dict(values))
    settings.pop("seeds")
    settings.pop("experiment")
    if "train." in train_vals:
        cfg.train = _train_config(_TRAIN_DEFAULTS[kind], train_vals["train."], seeds, "train.")
    if "baseline." in train_vals:
        cfg.baseline = _train_config(baseline_defaults, train_vals["baseline."], seeds, "baseline.")
    return cfg


def load(kind: str, path=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    values = load_file(path) if path else {}
    for text in overrides:
        key, v = parse_override(text)
        values[key] = v
    if seed is not None:
        values["seeds"] = [int(seed)]
    if out is not None:
        values["out"] = str(out)
    return resolve(kind, values)
