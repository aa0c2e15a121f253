"""Exploration data for dynamics learning, and fitting the SSGP delta model to it."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim.controllers import ExplorationDriver
from .sim.track import centerline_frame
from .sim.vehicle import (ACTION_DIM, STATE_DIM, STATE_NAMES, Action, VehicleState,
                          integrate_rk4, process_noise, wrap_angle)
from .sim.world import World, detect_crash
from .ssgp import DynamicsModel, coordinate_search, fit_posterior

log = logging.getLogger(__name__)

DATA_COLUMNS = (
    [f"s_{n}" for n in STATE_NAMES] + ["steering", "throttle"]
    + [f"next_{n}" for n in STATE_NAMES] + ["noise_vx", "noise_vy", "noise_psidot"]
)
PSI = 2


@dataclass
class TransitionData:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    noise: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    def deltas(self) -> np.ndarray:
        d = self.next_states - self.states
        d[:, PSI] = wrap_angle(d[:, PSI])
        return d

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DATA_COLUMNS)
            for row in np.concatenate([self.states, self.actions, self.next_states,
                                       self.noise], axis=1):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TransitionData":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != tuple(DATA_COLUMNS):
                raise ValueError(f"{path}: unexpected columns {header}")
            arr = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(DATA_COLUMNS))
        s = STATE_DIM
        return cls(arr[:, :s], arr[:, s:s + 2], arr[:, s + 2:2 * s + 2], arr[:, 2 * s + 2:])


def collect_dynamics(world: World, n_rows: int, subsample: int = 10,
                     rng: np.random.Generator | None = None) -> TransitionData:
    """Drive the exploration controller and keep every ``subsample``-th transition.

    The car is respawned at a random centerline point after a crash. Noise
    draws are logged so each row can be replayed exactly.
    """
    rng = rng or np.random.default_rng(0)
    drive_rng, noise_rng, spawn_rng = rng.spawn(3)
    driver = ExplorationDriver(world.track, drive_rng, params=world.vehicle)
    rows_s, rows_a, rows_n, rows_w = [], [], [], []
    s = world.start_state()
    step = 0
    while len(rows_s) < n_rows:
        a = driver(s)
        w = process_noise(noise_rng, world.vehicle)
        nxt = integrate_rk4(s.as_array(), a.as_array(), world.dt, world.vehicle) + w
        nxt_state = VehicleState.from_array(nxt)
        if step % subsample == 0:
            rows_s.append(s.as_array())
            rows_a.append(a.as_array())
            rows_n.append(nxt_state.as_array())
            rows_w.append(w[3:])
        step += 1
        s = nxt_state
        if detect_crash(s, world.track_model):
            idx = int(spawn_rng.integers(len(world.track.centerline)))
            p, heading = centerline_frame(world.track, idx)
            s = VehicleState(float(p[0]), float(p[1]), heading, float(spawn_rng.uniform(1.0, 5.0)),
                             0.0, 0.0)
    return TransitionData(np.array(rows_s), np.array(rows_a), np.array(rows_n), np.array(rows_w))


def replay_transition(world: World, state, action, noise) -> np.ndarray:
    """Recompute a logged next state from its state, action and noise draw."""
    w = np.zeros(STATE_DIM)
    w[3:] = noise
    nxt = integrate_rk4(np.asarray(state, dtype=float), np.asarray(action, dtype=float),
                        world.dt, world.vehicle) + w
    return VehicleState.from_array(nxt).as_array()


@dataclass(frozen=True)
class DynamicsFitConfig:
    m: int = 40
    sigma_k_grid: tuple = (0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0)
    sigma_n_grid: tuple = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 2e-2, 3e-2)
    lengthscale_mult: tuple = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, float("inf"))
    sweeps: int = 2
    freq_seed: int = 0


def base_lengthscales(X: np.ndarray) -> np.ndarray:
    """Per-input length units: data spread for dynamic inputs, none for global position."""
    ls = np.std(X, axis=0)
    ls[0] = ls[1] = np.inf
    ls[PSI] = 1.0
    return np.maximum(ls, 1e-3)


def fit_dynamics(data: TransitionData, config: DynamicsFitConfig | None = None) -> DynamicsModel:
    """One SSGP per state dimension, each with its own evidence-maximizing hyperparameters."""
    config = config or DynamicsFitConfig()
    X, Y = data.inputs(), data.deltas()
    base = base_lengthscales(X)
    models = []
    for j in range(STATE_DIM):
        hyper = coordinate_search(X, Y[:, j], config.m, base, config.sigma_k_grid,
                                  config.sigma_n_grid, config.lengthscale_mult,
                                  periodic_dims=(PSI,), freq_seed=config.freq_seed + j,
                                  sweeps=config.sweeps)
        log.info("output %s: sigma_k=%g sigma_n=%g lengthscales=%s", STATE_NAMES[j],
                 hyper.sigma_k, hyper.sigma_n, np.round(hyper.lengthscales, 3))
        models.append(fit_posterior(X, Y[:, j], hyper, config.freq_seed + j))
    return DynamicsModel(models, STATE_DIM, ACTION_DIM)
