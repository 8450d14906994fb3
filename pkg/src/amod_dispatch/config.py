"""Experiment configuration: TOML file plus AMOD_<SECTION>__<KEY> overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import date, datetime, time, timezone
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__

ENV_PREFIX = "AMOD_"

DEFAULTS: dict = {
    "experiment": {"name": "toy", "kind": "toy", "output_dir": "runs", "seeds": [1]},
    "graph": {"file": "", "hex_radius": 3, "spacing_km": 0.917, "edge_steps": 1},
    "data": {"trips": "", "store": "", "downscale": 20, "window_start": "08:30", "split_seed": 0,
             "train": 200, "validation": 25, "test": 20, "interval_steps": 15, "epsilon": 1.0,
             "train_dates": [], "validation_dates": [], "test_dates": []},
    "episode": {"horizon": 60, "max_wait": 5, "fleet_size": 10, "placement": "uniform"},
    "pricing": {"revenue_per_km": 5.00, "cost_per_km": 4.50},
    "sac": {"alpha": 0.5, "gamma": 0.9, "smoothing": 5e-3, "batch_size": 128, "total_steps": 200_000,
            "warmup_steps": 20_000, "update_every": 20, "validate_every": 2_880, "buffer_capacity": 100_000,
            "learning_rate": 3e-4, "l2": 1e-4, "clip_norm": 10.0, "huber_delta": 10.0, "checkpoint_every": 0,
            "embed": 32, "request_attention": 256, "vehicle_attention": 128, "trunk": [1024, 512, 128, 32, 8]},
    "mpc": {"horizon": 5, "cap": 3, "node_budget": 2_000_000, "time_budget": 0.0, "max_pool": 5_000_000,
            "seeds": [0, 1, 2], "count_mode": "poisson"},
    "toy": {"n_nodes": 7, "horizon": 40, "max_wait": 5, "period": 8, "copies": 1, "noise_rate": 0.25,
            "skip_prob": 0.1, "n_validation": 8, "n_test": 20, "scenario_seed": 0},
    "kl_sweep": {"sizes": [100, 1000, 10000], "repetitions": 20, "hex_radius": 3, "n_intervals": 4,
                 "expected_per_interval": 200.0, "concentration": 0.5, "evaluate": False, "n_streams": 5,
                 "fleet_size": 20},
    "bench": {"fleet_sizes": [100, 500, 1000, 3000], "requests_per_vehicle": 0.055, "steps": 60,
              "mpc_max_fleet": 3000, "mpc_steps": 3, "dtype": "float32", "checkpoint": ""},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text
    # clock times such as 08:30 stay strings
    return text if isinstance(value, (date, time)) else value


def env_overrides(environ=None) -> dict:
    """AMOD_SAC__ALPHA=0.7 -> {"sac": {"alpha": 0.7}}."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, name = key[len(ENV_PREFIX):].lower().split("__", 1)
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    path: Optional[Path] = None

    def __getitem__(self, section: str) -> dict:
        return self.raw[section]

    @property
    def base_dir(self) -> Path:
        return self.path.parent if self.path is not None else Path.cwd()

    def resolve(self, value: str) -> Optional[Path]:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seeds(self) -> list:
        return [int(s) for s in self.raw["experiment"]["seeds"]]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def validate(self) -> None:
        exp = self.raw["experiment"]
        if exp["kind"] not in ("toy", "data"):
            raise ConfigError(f"experiment.kind must be 'toy' or 'data', got {exp['kind']!r}")
        d = self.raw["data"]
        sets = [set(d[k]) for k in ("train_dates", "validation_dates", "test_dates")]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ConfigError("date splits overlap")
        graph_file = self.resolve(self.raw["graph"]["file"])
        if graph_file is not None and not graph_file.exists():
            raise ConfigError(f"graph file not found: {graph_file}")


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> ExperimentConfig:
    doc = copy.deepcopy(DEFAULTS)
    p = Path(path) if path else None
    if p is not None:
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with p.open("rb") as fh:
            doc = _merge(doc, tomllib.load(fh))
    doc = _merge(doc, env_overrides(environ))
    if overrides:
        doc = _merge(doc, overrides)
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = ExperimentConfig(doc, p.resolve() if p is not None else None)
    cfg.validate()
    return cfg


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list
    started: str
    code_version: str = __version__
    finished: str = ""
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def begin(cls, command: str, cfg: ExperimentConfig, seeds) -> "RunManifest":
        return cls(command, cfg.hash, list(seeds), datetime.now(timezone.utc).isoformat())

    def finish(self, path, **artifacts) -> None:
        self.artifacts.update({k: str(v) for k, v in artifacts.items()})
        self.finished = datetime.now(timezone.utc).isoformat()
        Path(path).write_text(json.dumps(self.__dict__, indent=1, sort_keys=True))
