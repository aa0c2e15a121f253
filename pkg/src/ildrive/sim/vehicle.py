"""Ground-truth vehicle: a dynamic bicycle model with linear tires.

State layout everywhere in the package is ``(x, y, psi, vx, vy, psidot)``;
actions are ``(steering, throttle)`` in ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dims import ACTION_DIM, STATE_DIM, STATE_NAMES  # noqa: F401

DT = 0.02


def wrap_angle(psi):
    """Map angles to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(psi, dtype=float), 2.0 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    psidot: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.psi, self.vx, self.vy, self.psidot)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite vehicle state: {vals}")
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.vx, self.vy, self.psidot])

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        arr = np.asarray(arr, dtype=float).ravel()
        if arr.shape != (STATE_DIM,):
            raise ValueError(f"expected {STATE_DIM} state values, got {arr.shape}")
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class Action:
    steering: float = 0.0
    throttle: float = 0.0

    def clamped(self) -> "Action":
        return Action(float(np.clip(self.steering, -1.0, 1.0)),
                      float(np.clip(self.throttle, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steering, self.throttle])

    @classmethod
    def from_array(cls, arr) -> "Action":
        arr = np.asarray(arr, dtype=float).ravel()
        return cls(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of the 1/5-scale car.

    Rear cornering stiffness defaults to ``c_front * l_front / l_rear`` so the
    car is neutral-steer; with that balance the lateral tire forces can only
    remove translational kinetic energy when the wheels are straight.
    """

    mass: float = 22.0
    yaw_inertia: float = 1.2
    l_front: float = 0.34
    l_rear: float = 0.23
    c_front: float = 700.0
    c_rear: float | None = None
    k_steer: float = 0.45  # rad of road-wheel angle at full lock
    k_throttle: float = 120.0  # N at full throttle
    drag: float = 0.25  # N s^2 / m^2
    v_floor: float = 1.0  # m/s; tire forces fade out below this speed
    noise_std: tuple = (0.02, 0.02, 0.03)  # per-step std on (vx, vy, psidot)

    @property
    def c_rear_eff(self) -> float:
        if self.c_rear is not None:
            return self.c_rear
        return self.c_front * self.l_front / self.l_rear


def vehicle_derivatives(s: np.ndarray, a: np.ndarray, p: VehicleParams) -> np.ndarray:
    """Continuous-time state derivative; ``s`` may be (6,) or (n, 6)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    psi, vx, vy, r = s[..., 2], s[..., 3], s[..., 4], s[..., 5]
    delta = p.k_steer * a[..., 0]
    speed = np.abs(vx)
    u = np.maximum(speed, p.v_floor)
    fade = np.minimum(1.0, speed / p.v_floor)
    alpha_f = (vy + p.l_front * r) / u - delta
    alpha_r = (vy - p.l_rear * r) / u
    f_front = -fade * p.c_front * alpha_f
    f_rear = -fade * p.c_rear_eff * alpha_r
    f_long = p.k_throttle * a[..., 1] - p.drag * vx * speed

    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    cos_d, sin_d = np.cos(delta), np.sin(delta)
    out = np.empty(np.broadcast(s[..., 0], a[..., 0]).shape + (STATE_DIM,))
    out[..., 0] = vx * cos_psi - vy * sin_psi
    out[..., 1] = vx * sin_psi + vy * cos_psi
    out[..., 2] = r
    out[..., 3] = (f_long - f_front * sin_d) / p.mass + vy * r
    out[..., 4] = (f_rear + f_front * cos_d) / p.mass - vx * r
    out[..., 5] = (p.l_front * f_front * cos_d - p.l_rear * f_rear) / p.yaw_inertia
    return out


def integrate_rk4(s: np.ndarray, a: np.ndarray, dt: float, p: VehicleParams) -> np.ndarray:
    k1 = vehicle_derivatives(s, a, p)
    k2 = vehicle_derivatives(s + 0.5 * dt * k1, a, p)
    k3 = vehicle_derivatives(s + 0.5 * dt * k2, a, p)
    k4 = vehicle_derivatives(s + dt * k3, a, p)
    return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def process_noise(rng: np.random.Generator | None, p: VehicleParams) -> np.ndarray:
    """One draw of additive noise on the full state (zeros on the pose)."""
    w = np.zeros(STATE_DIM)
    if rng is not None:
        w[3:] = rng.normal(0.0, 1.0, size=3) * np.asarray(p.noise_std, dtype=float)
    return w


def step_dynamics(s: VehicleState, a: Action, dt: float = DT,
                  rng: np.random.Generator | None = None,
                  params: VehicleParams | None = None,
                  noise: np.ndarray | None = None) -> VehicleState:
    """Advance the car by ``dt`` seconds.

    One RK4 step of the bicycle model followed by additive Gaussian noise on
    ``(vx, vy, psidot)``. Pass ``rng=None`` for a noise-free step, or an
    explicit ``noise`` vector (length 6) to replay a logged draw.
    """
    params = params or VehicleParams()
    if not isinstance(s, VehicleState):
        s = VehicleState.from_array(s)
    a = a.clamped() if isinstance(a, Action) else Action.from_array(a).clamped()
    arr = integrate_rk4(s.as_array(), a.as_array(), dt, params)
    arr = arr + (process_noise(rng, params) if noise is None else np.asarray(noise))
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("vehicle integration produced non-finite state")
    return VehicleState.from_array(arr)
