"""Simulated world, rollouts with expert/learner mixing, and trajectory logs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..cost import CostWeights, TrackModel, fit_track_model, instantaneous_cost, position_cost
from .sensors import Observation, SensorConfig, synthesize_observation
from .track import TrackGeometry, centerline_frame, elliptical_track
from .vehicle import DT, Action, VehicleParams, VehicleState, step_dynamics

Policy = Callable[[Observation], Action]
Expert = Callable[[VehicleState], Action]

LOG_COLUMNS = ("step", "x", "y", "psi", "vx", "vy", "psidot", "steer_exec", "throttle_exec",
               "steer_expert", "throttle_expert", "cost", "executed_by")


def detect_crash(s: VehicleState, model: TrackModel) -> bool:
    """True once the car is on or beyond either boundary level set (|c_pos| >= 1)."""
    return bool(abs(position_cost(model, s.x, s.y)) >= 1.0)


@dataclass(frozen=True)
class World:
    track: TrackGeometry
    track_model: TrackModel
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    dt: float = DT
    start_index: int = 0
    start_speed: float = 3.0

    @classmethod
    def default(cls, **overrides) -> "World":
        track = elliptical_track()
        model = fit_track_model(track.inner_boundary, track.outer_boundary)
        return cls(track=track, track_model=model, **overrides)

    def with_changes(self, **changes) -> "World":
        return replace(self, **changes)

    @cached_property
    def segments(self) -> np.ndarray:
        return self.track.segments()

    def start_state(self) -> VehicleState:
        p, heading = centerline_frame(self.track, self.start_index)
        return VehicleState(float(p[0]), float(p[1]), heading, self.start_speed, 0.0, 0.0)

    def observe(self, s: VehicleState, rng=None) -> Observation:
        return synthesize_observation(s, self.track, rng, self.sensors, self.segments)

    def step(self, s: VehicleState, a: Action, rng=None) -> VehicleState:
        return step_dynamics(s, a, self.dt, rng, self.vehicle)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    expert_actions: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    executed_by: list = field(default_factory=list)
    crashed_at: Optional[int] = None
    horizon: int = 0
    final_state: Optional[VehicleState] = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def completion_ratio(self) -> float:
        if self.horizon == 0:
            return 1.0
        return len(self) / self.horizon

    @property
    def expert_fraction(self) -> float:
        if not self.executed_by:
            return 0.0
        return sum(e == "expert" for e in self.executed_by) / len(self.executed_by)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for k, s in enumerate(self.states):
                a = self.actions[k]
                e = self.expert_actions[k] if self.expert_actions else None
                row = [k, *map(repr, s.as_array().tolist()), repr(a.steering), repr(a.throttle),
                       repr(e.steering) if e else "", repr(e.throttle) if e else "",
                       repr(self.costs[k]), self.executed_by[k]]
                writer.writerow(row)


def rollout(policy: Optional[Policy], expert: Optional[Expert], mix_prob: float, T: int,
            world: World, rng: np.random.Generator, label: bool = True,
            start: VehicleState | None = None) -> Trajectory:
    """Run one episode, executing the expert with probability ``mix_prob`` per step.

    The expert, when given, is queried at every step and its action stored as
    the label whichever policy acted. The episode stops early when the car
    crashes; ``crashed_at`` is then the number of steps actually executed.
    """
    if not 0.0 <= mix_prob <= 1.0:
        raise ValueError("mix_prob must lie in [0, 1]")
    if expert is None and (mix_prob > 0.0 or label):
        if mix_prob > 0.0:
            raise ValueError("an expert is required when mix_prob > 0")
        label = False
    if policy is None and mix_prob < 1.0:
        raise ValueError("a learner policy is required when mix_prob < 1")
    world_rng, sensor_rng, mix_rng = rng.spawn(3)
    if hasattr(expert, "reset"):
        expert.reset()

    traj = Trajectory(horizon=T)
    s = world.start_state() if start is None else start
    for t in range(T):
        if detect_crash(s, world.track_model):
            traj.crashed_at = t
            break
        obs = world.observe(s, sensor_rng)
        a_star = expert(s).clamped() if (expert is not None and (label or mix_prob > 0)) else None
        use_expert = mix_rng.random() < mix_prob
        a = a_star if use_expert else policy(obs).clamped()
        traj.states.append(s)
        traj.observations.append(obs)
        traj.actions.append(a)
        if a_star is not None:
            traj.expert_actions.append(a_star)
        traj.costs.append(instantaneous_cost(s, a, world.weights, world.track_model))
        traj.executed_by.append("expert" if use_expert else "learner")
        s = world.step(s, a, world_rng)
    traj.final_state = s
    return traj
