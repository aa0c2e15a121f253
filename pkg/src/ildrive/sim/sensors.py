"""Learner-side sensing: boundary range rays plus a noisy wheel-speed reading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .track import TrackGeometry
from .vehicle import VehicleState

N_RAYS = 19
MAX_RANGE = 20.0


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = N_RAYS
    fov_deg: float = 180.0
    max_range: float = MAX_RANGE
    wheel_noise_std: float = 0.05

    @property
    def bearings(self) -> np.ndarray:
        half = np.deg2rad(self.fov_deg) / 2.0
        return np.linspace(-half, half, self.n_rays)


@dataclass(frozen=True)
class Observation:
    rays: np.ndarray
    wheel_speed: float

    def as_array(self) -> np.ndarray:
        return np.append(self.rays, self.wheel_speed)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def cast_rays(origin, directions, segments: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each unit direction to the first segment hit, capped at ``max_range``."""
    origin = np.asarray(origin, dtype=float)
    directions = np.atleast_2d(directions)
    p0 = segments[:, 0, :]
    d = segments[:, 1, :] - p0
    rel = p0 - origin  # (s, 2)
    denom = _cross(directions[:, None, :], d[None, :, :])  # (k, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(rel[None, :, :], d[None, :, :]) / denom
        u = _cross(rel[None, :, :], directions[:, None, :]) / denom
    hit = (np.abs(denom) > 1e-15) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def synthesize_observation(s: VehicleState, track: TrackGeometry,
                           rng: np.random.Generator | None = None,
                           config: SensorConfig | None = None,
                           segments: np.ndarray | None = None) -> Observation:
    """Ray ranges to the track boundaries and a wheel-speed reading floored at zero."""
    config = config or SensorConfig()
    segs = track.segments() if segments is None else segments
    ang = s.psi + config.bearings
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rays = cast_rays((s.x, s.y), dirs, segs, config.max_range)
    noise = rng.normal(0.0, config.wheel_noise_std) if rng is not None else 0.0
    return Observation(rays, float(max(s.vx + noise, 0.0)))
