"""Experiment configuration: one JSON document, overridable key by key."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .engine import SimConfig
from .env import EnvironmentSpec, InvalidEnvironment

OUTPUT_ENV_VAR = "BRWRE_OUTPUT_DIR"
DEFAULT_OUTPUT = "brwre-out"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


PRESET = {
    "environment": {"family": "two_point", "lo": 0.5, "hi": 1.5, "p_lo": 0.5},
    "mode": "annealed",
    "x0": 0,
    "T": 10.0,
    "L": 1,
    "eta": 0.0,
    "population_cap": 100_000_000,
    "delta": 0.5,
    "seeds": {"env_seed": 2024, "estimate_seed": 11, "diagnose_seed": 13},
    "replicas": {"simulate": 100, "estimate": 2000, "sigma": 10000, "diagnose": 2000, "verify": 2000},
    "sigma": {"y": 1, "z": [1, 2, 3, 4, 5, 6]},
    "xstar_factor": 1.2,
    "b_delta": "density",
    "tightness": {"multiplier": 1.25, "centering": "auto", "group": 10},
    "verify_times": [2, 4, 6],
    "workers": 1,
    "output_dir": None,
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, items) -> dict:
    doc = copy.deepcopy(doc)
    for item in items or ():
        path, value = parse_override(item)
        node = doc
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section {part!r} in {item!r}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        node[path[-1]] = value
    return doc


@dataclass
class ExperimentConfig:
    doc: dict

    def __post_init__(self):
        self.doc = _merge(PRESET, self.doc)
        try:
            self.validate()
        except (InvalidEnvironment, ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        return cls(apply_overrides(_merge(PRESET, doc), overrides))

    def validate(self) -> None:
        d = self.doc
        unknown = set(d) - set(PRESET)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if d["mode"] not in ("quenched", "annealed"):
            raise ConfigError(f"mode must be quenched or annealed, got {d['mode']!r}")
        s = d["seeds"]
        if s["estimate_seed"] == s["diagnose_seed"]:
            raise ConfigError("estimate_seed and diagnose_seed must differ")
        for key, v in s.items():
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"seed {key} must be a non-negative integer")
        if not 0 < d["delta"] < 1:
            raise ConfigError("delta must lie in (0, 1)")
        for key, v in d["replicas"].items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"replicas.{key} must be a positive integer")
        if d["sigma"]["y"] not in (-1, 1):
            raise ConfigError("sigma.y must be -1 or +1")
        if d["b_delta"] not in ("density", "direct"):
            raise ConfigError("b_delta must be 'density' or 'direct'")
        if not isinstance(d["workers"], int) or d["workers"] < 1:
            raise ConfigError("workers must be a positive integer")
        self.sim
        self.env_spec

    @property
    def env_spec(self) -> EnvironmentSpec:
        e = dict(self.doc["environment"])
        e["seed"] = self.doc["seeds"]["env_seed"]
        return EnvironmentSpec.from_dict(e)

    @property
    def sim(self) -> SimConfig:
        d = self.doc
        return SimConfig(x0=int(d["x0"]), T=float(d["T"]), L=int(d["L"]), eta=float(d["eta"]),
                         population_cap=int(d["population_cap"]))

    @property
    def source(self):
        """A fixed environment in quenched mode, the environment law in annealed mode."""
        from .env import Environment
        return Environment(self.env_spec) if self.doc["mode"] == "quenched" else self.env_spec

    def __getitem__(self, key):
        return self.doc[key]

    def seed(self, name: str) -> int:
        return int(self.doc["seeds"][name])

    def replicas(self, stage: str) -> int:
        return int(self.doc["replicas"][stage])

    def output_dir(self) -> Path:
        out = self.doc["output_dir"] or os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT
        return Path(out)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2) + "\n"
