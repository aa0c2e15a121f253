"""Driving task cost: bicubic track-position polynomial, speed, slip and action terms.

The expected cost under a Gaussian belief is expanded to second order in the
covariance, ``L(mu, Sigma, u) = l(mu, u) + 0.5 tr(Sigma d2l/dx2)``, and its
derivatives with respect to the stacked belief ``[mu; vec(Sigma)]`` are
evaluated in closed form. The state part of ``l`` splits into two planar
blocks, position ``(x, y)`` and velocity ``(vx, vy)``, so every derivative
tensor is assembled from 2-D pieces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import sympy as sp
from numpy.polynomial import polynomial as npoly

from .dims import ACTION_DIM, STATE_DIM

SLIP_EPS = 1e-3
POS = (0, 1)
VEL = (3, 4)


class TrackFitError(ValueError):
    """The boundary regression is underdetermined or rank deficient."""


# --------------------------------------------------------------------------
# Track model
# --------------------------------------------------------------------------

def bicubic_terms(x, y) -> np.ndarray:
    """Monomials ``x**i * y**j`` ordered so column ``4*i + j`` pairs with ``c_{4i+j}``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.stack([x ** i * y ** j for i in range(4) for j in range(4)], axis=-1)


@dataclass(frozen=True)
class TrackModel:
    coeffs: tuple
    fit_residual_max: float = 0.0
    n_points: int = 0

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (16,) or not np.all(np.isfinite(c)):
            raise ValueError("TrackModel needs exactly 16 finite coefficients")
        object.__setattr__(self, "coeffs", tuple(float(v) for v in c))

    @property
    def coeff_grid(self) -> np.ndarray:
        """Coefficients as a 4x4 grid indexed ``[x_power, y_power]``."""
        return np.asarray(self.coeffs).reshape(4, 4)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path) -> "TrackModel":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["coeffs"]), d["fit_residual_max"], d.get("n_points", 0))


def fit_track_model(inner, outer) -> TrackModel:
    """Least-squares bicubic with inner boundary labeled -1 and outer +1."""
    inner = np.asarray(inner, dtype=float).reshape(-1, 2)
    outer = np.asarray(outer, dtype=float).reshape(-1, 2)
    pts = np.vstack([inner, outer])
    labels = np.concatenate([-np.ones(len(inner)), np.ones(len(outer))])
    if len(pts) < 16:
        raise TrackFitError(f"need at least 16 labeled points, got {len(pts)}")
    # column scaling keeps x**3 y**3 from swamping the conditioning
    scale = max(float(np.max(np.abs(pts))), 1e-12)
    design = bicubic_terms(pts[:, 0] / scale, pts[:, 1] / scale)
    rank = np.linalg.matrix_rank(design)
    if rank < 16:
        raise TrackFitError(f"design matrix rank {rank} < 16")
    coef_scaled, *_ = np.linalg.lstsq(design, labels, rcond=None)
    powers = np.array([i + j for i in range(4) for j in range(4)])
    coeffs = coef_scaled / scale ** powers
    resid = bicubic_terms(pts[:, 0], pts[:, 1]) @ coeffs - labels
    return TrackModel(tuple(coeffs), float(np.max(np.abs(resid))), len(pts))


def position_cost(model: TrackModel, x, y):
    """Evaluate the 16-term bicubic at ``(x, y)``; broadcasts over arrays."""
    out = npoly.polyval2d(np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                          model.coeff_grid)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Weights and point cost
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostWeights:
    alpha1: float = 2.5
    alpha2: float = 1.0
    alpha3: float = 100.0
    alpha4: float = 60.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    v_desired: float = 7.5

    def __post_init__(self):
        for name, val in asdict(self).items():
            if name != "v_desired" and val < 0:
                raise ValueError(f"cost weight {name} must be >= 0")


def slip_angle_sq(vx, vy, eps: float = SLIP_EPS):
    return np.arctan(np.asarray(vy) / np.maximum(np.abs(vx), eps)) ** 2


def instantaneous_cost(s, a, w: CostWeights, model: TrackModel) -> float:
    """Point cost ``l(s, a)`` for a state array/VehicleState and an action."""
    s = s.as_array() if hasattr(s, "as_array") else np.asarray(s, dtype=float)
    a = a.as_array() if hasattr(a, "as_array") else np.asarray(a, dtype=float)
    c_pos = position_cost(model, s[0], s[1])
    return float(w.alpha1 * c_pos ** 2
                 + w.alpha2 * (s[3] - w.v_desired) ** 2
                 + w.alpha3 * slip_angle_sq(s[3], s[4])
                 + w.alpha4 * (w.gamma1 * a[0] ** 2 + w.gamma2 * a[1] ** 2))


def state_cost_batch(states, w: CostWeights, model: TrackModel) -> np.ndarray:
    states = np.atleast_2d(states)
    c_pos = position_cost(model, states[:, 0], states[:, 1])
    return (w.alpha1 * c_pos ** 2 + w.alpha2 * (states[:, 3] - w.v_desired) ** 2
            + w.alpha3 * slip_angle_sq(states[:, 3], states[:, 4]))


# --------------------------------------------------------------------------
# Planar derivative tensors up to fourth order
# --------------------------------------------------------------------------

def _multi_indices(order: int):
    return [tuple(idx) for idx in np.ndindex(*(2,) * order)]


def _poly_derivs(grid: np.ndarray, x, y, max_order: int = 4):
    """Tensors of all partials of ``sum grid[i,j] x^i y^j`` up to ``max_order``."""
    out = [npoly.polyval2d(x, y, grid)]
    cache = {(): grid}
    for order in range(1, max_order + 1):
        t = np.empty(np.shape(x) + (2,) * order)
        for idx in _multi_indices(order):
            nx = idx.count(0)
            key = (nx, order - nx)
            if key not in cache:
                g = npoly.polyder(grid, nx, axis=0) if nx else grid
                g = npoly.polyder(g, order - nx, axis=1) if order - nx else g
                cache[key] = g
            t[(...,) + idx] = npoly.polyval2d(x, y, cache[key])
        out.append(t)
    return out


@lru_cache(maxsize=1)
def _slip_derivative_table():
    """Lambdified partials of ``atan(vy/u)**2`` w.r.t. ``(u, vy)`` up to fourth order."""
    u, vy = sp.symbols("u vy", positive=False, real=True)
    h = sp.atan(vy / u) ** 2
    table = {}
    for order in range(5):
        for nu in range(order + 1):
            expr = sp.diff(h, u, nu, vy, order - nu) if order else h
            table[(nu, order - nu)] = sp.lambdify((u, vy), sp.simplify(expr), "numpy")
    return table


def _slip_derivs(vx, vy, eps: float = SLIP_EPS):
    """Partials of ``atan(vy / max(|vx|, eps))**2`` w.r.t. ``(vx, vy)``.

    Away from the guard the vx-derivatives are the u-derivatives times
    ``sign(vx)**k``; inside the guard the term does not depend on vx.
    """
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    table = _slip_derivative_table()
    guarded = np.abs(vx) < eps
    u = np.where(guarded, eps, np.abs(vx))
    sgn = np.where(guarded, 0.0, np.sign(vx))
    out = [np.broadcast_to(table[(0, 0)](u, vy), vx.shape).astype(float)]
    for order in range(1, 5):
        t = np.empty(vx.shape + (2,) * order)
        for idx in _multi_indices(order):
            nu = idx.count(0)
            val = np.broadcast_to(table[(nu, order - nu)](u, vy), vx.shape)
            t[(...,) + idx] = val * sgn ** nu
        out.append(t)
    return out


# --------------------------------------------------------------------------
# Expected cost expansion
# --------------------------------------------------------------------------

@dataclass
class CostExpansion:
    """Quadratic model of the expected cost in ``(b, u)``; arrays may carry a leading batch axis."""

    L0: np.ndarray
    Lb: np.ndarray
    Lu: np.ndarray
    Lbb: np.ndarray
    Lub: np.ndarray
    Luu: np.ndarray

    def __getitem__(self, k) -> "CostExpansion":
        return CostExpansion(self.L0[k], self.Lb[k], self.Lu[k], self.Lbb[k], self.Lub[k], self.Luu[k])


def check_covariance(sigma: np.ndarray, tol: float = 1e-9) -> None:
    """Raise unless every covariance in the batch is symmetric PSD."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise ValueError("covariance has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(sigma))))
    if np.max(np.abs(sigma - np.swapaxes(sigma, -1, -2)), initial=0.0) > tol * scale:
        raise ValueError("covariance is not symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (sigma + np.swapaxes(sigma, -1, -2)))) < -tol * scale:
        raise ValueError("covariance is not positive semi-definite")


class TaskCost:
    """Expected driving cost over Gaussian beliefs, for the DDP planner."""

    def __init__(self, weights: CostWeights, model: TrackModel):
        self.weights = weights
        self.model = model
        w = weights
        g = model.coeff_grid
        self._pos_grid = w.alpha1 * _polymul2d(g, g)

    def _blocks(self, mu):
        """``(indices, derivs)`` for the position and velocity blocks."""
        w = self.weights
        pos = _poly_derivs(self._pos_grid, mu[:, 0], mu[:, 1])
        slip = _slip_derivs(mu[:, 3], mu[:, 4])
        vel = [w.alpha3 * d for d in slip]
        dv = mu[:, 3] - w.v_desired
        vel[0] = vel[0] + w.alpha2 * dv ** 2
        vel[1][:, 0] += 2.0 * w.alpha2 * dv
        vel[2][:, 0, 0] += 2.0 * w.alpha2
        return ((POS, pos), (VEL, vel))

    def point_cost(self, mu, u) -> np.ndarray:
        mu = np.atleast_2d(mu)
        u = np.atleast_2d(u)
        w = self.weights
        return state_cost_batch(mu, w, self.model) + w.alpha4 * (
            w.gamma1 * u[:, 0] ** 2 + w.gamma2 * u[:, 1] ** 2)

    def expected(self, mu, sigma, u) -> np.ndarray:
        """``L0`` only, batched over a leading axis."""
        mu = np.atleast_2d(mu)
        sigma = np.asarray(sigma).reshape(-1, STATE_DIM, STATE_DIM)
        total = self.point_cost(mu, u)
        for idx, d in self._blocks(mu):
            sub = sigma[:, idx][:, :, idx]
            total = total + 0.5 * np.einsum("nab,nab->n", sub, d[2])
        return total

    def expand(self, mu, sigma, u) -> CostExpansion:
        """Batched expansion w.r.t. ``b = [mu; vec(Sigma)]`` (row-major vec) and ``u``."""
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        n = mu.shape[0]
        sigma = np.asarray(sigma, dtype=float).reshape(n, STATE_DIM, STATE_DIM)
        u = np.atleast_2d(np.asarray(u, dtype=float))
        w = self.weights
        nb = STATE_DIM + STATE_DIM ** 2

        L0 = self.point_cost(mu, u)
        Lmu = np.zeros((n, STATE_DIM))
        Lmumu = np.zeros((n, STATE_DIM, STATE_DIM))
        Lsig = np.zeros((n, STATE_DIM, STATE_DIM))
        Lsigmu = np.zeros((n, STATE_DIM, STATE_DIM, STATE_DIM))
        for idx, (f0, d1, d2, d3, d4) in self._blocks(mu):
            ix = np.ix_(idx, idx)
            sub = sigma[:, idx][:, :, idx]
            L0 = L0 + 0.5 * np.einsum("nab,nab->n", sub, d2)
            Lmu[:, idx] += d1 + 0.5 * np.einsum("nab,nabk->nk", sub, d3)
            Lmumu[(slice(None),) + ix] += d2 + 0.5 * np.einsum("nab,nabkl->nkl", sub, d4)
            Lsig[(slice(None),) + ix] += 0.5 * d2
            for ia, a in enumerate(idx):
                for ib, b in enumerate(idx):
                    Lsigmu[:, a, b, list(idx)] += 0.5 * d3[:, ia, ib, :]

        Lb = np.concatenate([Lmu, Lsig.reshape(n, -1)], axis=1)
        Lbb = np.zeros((n, nb, nb))
        Lbb[:, :STATE_DIM, :STATE_DIM] = Lmumu
        cross = Lsigmu.reshape(n, STATE_DIM ** 2, STATE_DIM)
        Lbb[:, STATE_DIM:, :STATE_DIM] = cross
        Lbb[:, :STATE_DIM, STATE_DIM:] = np.swapaxes(cross, 1, 2)
        Lbb = 0.5 * (Lbb + np.swapaxes(Lbb, 1, 2))

        gam = np.array([w.gamma1, w.gamma2])
        Lu = 2.0 * w.alpha4 * gam * u
        Luu = np.broadcast_to(np.diag(2.0 * w.alpha4 * gam), (n, ACTION_DIM, ACTION_DIM)).copy()
        Lub = np.zeros((n, ACTION_DIM, nb))
        return CostExpansion(L0, Lb, Lu, Lbb, Lub, Luu)


def _polymul2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i:i + b.shape[0], j:j + b.shape[1]] += a[i, j] * b
    return out


def expected_cost_expansion(belief, a, w: CostWeights, model: TrackModel) -> CostExpansion:
    """Expansion of ``E l(x, a)`` for ``x ~ N(belief.mu, belief.sigma)``."""
    sigma = np.asarray(belief.sigma, dtype=float)
    check_covariance(sigma)
    a = a.as_array() if hasattr(a, "as_array") else np.asarray(a, dtype=float)
    return TaskCost(w, model).expand(belief.mu[None], sigma[None], a[None])[0]
