"""Scripted state-feedback drivers: a centerline pure-pursuit tracker and an exploration wrapper."""

from __future__ import annotations

import numpy as np

from .track import TrackGeometry
from .vehicle import Action, VehicleParams, VehicleState


class CenterlineTracker:
    """Pure pursuit on the centerline with a proportional speed loop."""

    def __init__(self, track: TrackGeometry, target_speed: float = 4.0, lookahead: float = 2.5,
                 params: VehicleParams | None = None, speed_gain: float = 0.5):
        self.center = np.asarray(track.centerline)
        self.target_speed = target_speed
        self.lookahead = lookahead
        self.params = params or VehicleParams()
        self.speed_gain = speed_gain
        seg = np.roll(self.center, -1, axis=0) - self.center
        self._arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])

    def __call__(self, s: VehicleState) -> Action:
        p = self.params
        pos = np.array([s.x, s.y])
        i = int(np.argmin(np.sum((self.center - pos) ** 2, axis=1)))
        n = len(self.center)
        # walk forward (counter-clockwise) until the lookahead distance is covered
        target_arc = self._arc[i] + self.lookahead + 0.1 * max(s.vx, 0.0)
        j = i
        while self._arc[j % n] + (j // n) * self._arc[-1] < target_arc:
            j += 1
        goal = self.center[j % n]
        d = goal - pos
        local_y = -np.sin(s.psi) * d[0] + np.cos(s.psi) * d[1]
        dist2 = max(float(d @ d), 1e-6)
        curvature = 2.0 * local_y / dist2
        delta = np.arctan(curvature * (p.l_front + p.l_rear))
        steer = delta / p.k_steer
        ff = p.drag * self.target_speed ** 2 / p.k_throttle
        throttle = ff + self.speed_gain * (self.target_speed - s.vx)
        return Action(float(steer), float(throttle)).clamped()


class ExplorationDriver:
    """Tracker with smooth random steering noise and a randomly re-drawn target speed.

    Used to gather dynamics-learning data; all randomness comes from ``rng``.
    """

    def __init__(self, track: TrackGeometry, rng: np.random.Generator, speed_range=(1.5, 9.0),
                 steer_noise: float = 0.35, throttle_noise: float = 0.25, hold_steps: int = 150,
                 params: VehicleParams | None = None):
        self.tracker = CenterlineTracker(track, params=params)
        self.rng = rng
        self.speed_range = speed_range
        self.steer_noise = steer_noise
        self.throttle_noise = throttle_noise
        self.hold_steps = hold_steps
        self._ou = np.zeros(2)
        self._t = 0

    def __call__(self, s: VehicleState) -> Action:
        if self._t % self.hold_steps == 0:
            self.tracker.target_speed = float(self.rng.uniform(*self.speed_range))
        self._t += 1
        # Ornstein-Uhlenbeck perturbation, time constant ~0.3 s at 50 Hz
        self._ou += -0.07 * self._ou + 0.37 * self.rng.normal(size=2) * np.array(
            [self.steer_noise, self.throttle_noise])
        base = self.tracker(s)
        return Action(base.steering + self._ou[0], base.throttle + self._ou[1]).clamped()
