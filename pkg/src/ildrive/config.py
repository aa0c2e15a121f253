"""Experiment configuration: defaults, YAML loading, hashing and named seed substreams."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np
import yaml

from .cost import CostWeights, fit_track_model
from .ddp import DDPConfig
from .dynamics import DynamicsFitConfig
from .il import CollectConfig, TrainConfig
from .sim.sensors import SensorConfig
from .sim.track import elliptical_track
from .sim.vehicle import VehicleParams
from .sim.world import World

DEFAULTS = {
    "seed": 0,
    "world": {
        "track": {"semi_major": 13.0, "semi_minor": 8.0, "width": 3.0, "n_points": 400},
        "vehicle": {},
        "sensors": {},
        "start_index": 0,
        "start_speed": 3.0,
    },
    "cost": {},
    "collect": {"n_rows": 9000, "subsample": 10},
    "ssgp": {"m": 40, "sweeps": 2},
    "ddp": {},
    "expert": {"eval_rollouts": 3, "eval_T": 3000},
    "il": {
        "mode": "online",
        "n_iters": 3,
        "samples_per_iter": 1500,
        "beta": 0.6,
        "rollout_steps": 1500,
        "max_crashed_rollouts": 20,
        "epochs": 20,
        "batch_size": 64,
        "lr": 1e-3,
        "eval_rollouts": 3,
        "eval_T": 3000,
    },
}

# Config sections each pipeline stage reads, cumulative along the chain.
STAGE_SECTIONS = {
    "collect-dynamics": ("seed", "world", "collect"),
    "train-ssgp": ("seed", "world", "collect", "ssgp"),
    "run-expert": ("seed", "world", "collect", "ssgp", "cost", "ddp", "expert"),
    "train-batch": ("seed", "world", "collect", "ssgp", "cost", "ddp", "il"),
    "train-online": ("seed", "world", "collect", "ssgp", "cost", "ddp", "il"),
    "evaluate": ("seed", "world", "collect", "ssgp", "cost", "ddp", "il"),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            # vehicle/sensors/cost/ddp are open sections validated by their dataclasses
            if path.rstrip(".") not in ("world.vehicle", "world.sensors", "cost", "ddp"):
                raise ConfigError(f"unknown config key {where!r}")
            out[key] = val
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve(raw: dict | None = None, seed: int | None = None) -> dict:
    """Defaults overlaid with ``raw`` (and ``seed`` if given), validated."""
    cfg = _merge(DEFAULTS, raw or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg["il"]["mode"] not in ("batch", "online"):
        raise ConfigError("il.mode must be 'batch' or 'online'")
    # build every typed object once so bad values fail here, not mid-run
    build_world(cfg)
    ddp_config(cfg)
    fit_config(cfg)
    train_config(cfg)
    return cfg


def load(path=None, seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return resolve(raw, seed)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def content_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def section_hashes(cfg: dict, stage: str) -> dict:
    return {name: content_hash(cfg[name]) for name in STAGE_SECTIONS[stage]}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (world, freqs, dropout, shuffling, mixing, ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31))


# --------------------------------------------------------------------------
# Typed views
# --------------------------------------------------------------------------

def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def build_world(cfg: dict) -> World:
    w = cfg["world"]
    try:
        track = elliptical_track(**w["track"])
        model = fit_track_model(track.inner_boundary, track.outer_boundary)
        return World(track=track, track_model=model, vehicle=VehicleParams(**_tuples(w["vehicle"])),
                     sensors=SensorConfig(**w["sensors"]), weights=CostWeights(**cfg["cost"]),
                     start_index=int(w["start_index"]), start_speed=float(w["start_speed"]))
    except TypeError as exc:
        raise ConfigError(f"bad world/cost section: {exc}") from exc


def ddp_config(cfg: dict) -> DDPConfig:
    try:
        return DDPConfig(**_tuples(cfg["ddp"]))
    except TypeError as exc:
        raise ConfigError(f"bad ddp section: {exc}") from exc


def fit_config(cfg: dict) -> DynamicsFitConfig:
    s = cfg["ssgp"]
    return DynamicsFitConfig(m=int(s["m"]), sweeps=int(s["sweeps"]))


def train_config(cfg: dict) -> TrainConfig:
    il = cfg["il"]
    return TrainConfig(int(il["epochs"]), int(il["batch_size"]), float(il["lr"]))


def collect_config(cfg: dict) -> CollectConfig:
    il = cfg["il"]
    return CollectConfig(int(il["rollout_steps"]), int(il["max_crashed_rollouts"]))
