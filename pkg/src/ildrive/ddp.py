"""Belief-space Differential Dynamic Programming and the receding-horizon MPC expert.

The solver is generic over a *problem* object exposing

* ``nb``, ``nu`` and ``u_bounds`` (``(lo, hi)`` arrays or ``None``),
* ``rollout(b0, U_nom, B_nom, kff, Kfb, alpha) -> (B, U)``,
* ``costs(B, U) -> (running (T,), terminal)``,
* ``linearize(B, U) -> (Fb (T, nb, nb), Fu (T, nb, nu))``,
* ``expand(B, U) -> (CostExpansion over T steps, (L0, Lb, Lbb) terminal)``.

:class:`BeliefProblem` plans over ``b = [mu; vec(Sigma)]`` through a learned
SSGP model; :class:`LinearQuadraticProblem` is a plain LQ instance used as an
exact Riccati reference.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .cost import SLIP_EPS, CostExpansion, CostWeights, TaskCost, TrackModel
from .sim.vehicle import ACTION_DIM, STATE_DIM, Action, VehicleState
from .ssgp import Belief, DynamicsModel, as_dynamics, predict_derivatives, propagate_belief

log = logging.getLogger(__name__)

SIGMA0 = 1e-6


class NotPositiveDefinite(RuntimeError):
    """Regularized Q_uu failed its Cholesky factorization at some step."""

    def __init__(self, step: int):
        super().__init__(f"Q_uu + reg*I not positive definite at step {step}")
        self.step = step


@dataclass(frozen=True)
class DDPConfig:
    T_h: int = 100
    max_iters: int = 50
    reg_init: float = 1e-6
    reg_min: float = 1e-9
    reg_max: float = 1e6
    reg_scale_up: float = 10.0
    reg_scale_down: float = 0.5
    line_search_alphas: tuple = tuple(0.5 ** k for k in range(7))
    tol_cost: float = 1e-4

    def __post_init__(self):
        if self.T_h < 1:
            raise ValueError("T_h must be >= 1")
        if not 0 < self.reg_min <= self.reg_init <= self.reg_max:
            raise ValueError("need 0 < reg_min <= reg_init <= reg_max")
        alphas = tuple(float(a) for a in self.line_search_alphas)
        if not alphas or any(not 0 < a <= 1 for a in alphas):
            raise ValueError("line-search alphas must lie in (0, 1]")
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("line-search alphas must be decreasing")
        object.__setattr__(self, "line_search_alphas", alphas)


@dataclass
class BeliefTrajectory:
    """Nominal beliefs ``(T+1, nb)`` and actions ``(T, nu)`` with per-step costs."""

    beliefs: np.ndarray
    actions: np.ndarray
    step_costs: np.ndarray
    terminal_cost: float

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.step_costs) + self.terminal_cost)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def belief(self, k: int, dim: int = STATE_DIM) -> Belief:
        return Belief.from_vector(self.beliefs[k], dim)


@dataclass
class Gains:
    feedforward: np.ndarray  # (T, nu)
    feedback: np.ndarray  # (T, nu, nb)
    dV: tuple = (0.0, 0.0)  # expected change = alpha*dV[0] + alpha^2*dV[1]

    def expected_change(self, alpha: float) -> float:
        return alpha * self.dV[0] + alpha ** 2 * self.dV[1]


@dataclass
class DDPSolution:
    nominal: BeliefTrajectory
    feedforward: np.ndarray
    feedback: np.ndarray
    value_coeffs: list  # per step (V0, Vb, Vbb)
    converged: bool
    iterations: int
    cost_history: list = field(default_factory=list)
    log: list = field(default_factory=list)  # (iteration, cost, reg, alpha_accepted)
    degraded: bool = False

    @property
    def actions(self) -> np.ndarray:
        return self.nominal.actions

    def write_log(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "reg", "alpha_accepted"])
            w.writerows(self.log)


# --------------------------------------------------------------------------
# Backward / forward passes and the solver loop
# --------------------------------------------------------------------------

def backward_pass(expansions: CostExpansion, terminal, Fb: np.ndarray, Fu: np.ndarray,
                  reg: float, return_values: bool = False):
    """Riccati-like value recursion over the quadratized problem.

    ``terminal`` is ``(V0, Vb, Vbb)`` at the last belief. Raises
    :class:`NotPositiveDefinite` when ``Q_uu + reg*I`` cannot be factored.
    Returns :class:`Gains` (and the value coefficients when requested).
    """
    V0, Vb, Vbb = terminal
    c = np.ascontiguousarray
    T, nb, _ = Fb.shape
    nu = Fu.shape[2]
    Lub = expansions.Lub if np.size(expansions.Lub) else np.zeros((T, nu, nb))
    kff, Kfb, V0s, Vbs, Vbbs, d1, d2, fail = _kernels.backward(
        c(expansions.L0, dtype=float), c(expansions.Lb, dtype=float), c(expansions.Lu, dtype=float),
        c(expansions.Lbb, dtype=float), c(Lub, dtype=float), c(expansions.Luu, dtype=float),
        float(V0), c(Vb, dtype=float), c(Vbb, dtype=float), c(Fb, dtype=float), c(Fu, dtype=float),
        float(reg))
    if fail >= 0:
        raise NotPositiveDefinite(int(fail))
    gains = Gains(kff, Kfb, (float(d1), float(d2)))
    if not return_values:
        return gains
    values = [(float(V0s[t]), Vbs[t], Vbbs[t]) for t in range(T + 1)]
    return gains, values


def forward_pass(problem, nominal: BeliefTrajectory, gains: Gains, alpha: float) -> BeliefTrajectory:
    """Roll ``u = u_nom + alpha*k + K (b - b_nom)`` through the problem's dynamics."""
    B, U = problem.rollout(nominal.beliefs[0], nominal.actions, nominal.beliefs,
                           gains.feedforward, gains.feedback, alpha)
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(U))):
        raise FloatingPointError("non-finite belief in forward pass")
    run, term = problem.costs(B, U)
    return BeliefTrajectory(B, U, run, float(term))


def initial_trajectory(problem, b0, u_init) -> BeliefTrajectory:
    U0 = np.asarray(u_init, dtype=float)
    T, nu = U0.shape
    nb = problem.nb
    zero = Gains(np.zeros((T, nu)), np.zeros((T, nu, nb)))
    seed = BeliefTrajectory(np.tile(np.asarray(b0, dtype=float), (T + 1, 1)), U0, np.zeros(T), 0.0)
    return forward_pass(problem, seed, zero, 0.0)


def ddp_solve(problem, b0, u_init, config: DDPConfig | None = None) -> DDPSolution:
    """Iterate backward/forward passes with LM regularization and backtracking.

    Converges when the predicted or realized improvement drops below
    ``tol_cost``. If no step is accepted even at ``reg_max`` the best
    trajectory so far is returned with ``converged = False``.
    """
    cfg = config or DDPConfig()
    traj = initial_trajectory(problem, b0, u_init)
    reg = cfg.reg_init
    history = [traj.total_cost]
    rows = [(0, traj.total_cost, reg, 0.0)]
    gains, values = None, []
    converged = False
    accepted = 0
    for it in range(1, cfg.max_iters + 1):
        exp, term = problem.expand(traj.beliefs, traj.actions)
        Fb, Fu = problem.linearize(traj.beliefs, traj.actions)
        while True:
            try:
                gains, values = backward_pass(exp, term, Fb, Fu, reg, return_values=True)
                break
            except NotPositiveDefinite:
                reg *= cfg.reg_scale_up
                if reg > cfg.reg_max:
                    gains = None
                    break
        if gains is None:
            break
        if -gains.expected_change(1.0) < cfg.tol_cost:
            converged = True
            # Report the unregularized policy at the converged nominal when Q_uu allows it.
            for final_reg in (0.0, cfg.reg_min):
                try:
                    gains, values = backward_pass(exp, term, Fb, Fu, final_reg, return_values=True)
                    break
                except NotPositiveDefinite:
                    pass
            break
        new = None
        for alpha in cfg.line_search_alphas:
            try:
                cand = forward_pass(problem, traj, gains, alpha)
            except FloatingPointError:
                continue
            if cand.total_cost < traj.total_cost:
                new = cand
                break
        if new is None:
            reg *= cfg.reg_scale_up
            rows.append((it, traj.total_cost, reg, 0.0))
            if reg > cfg.reg_max:
                break
            continue
        improvement = traj.total_cost - new.total_cost
        traj = new
        accepted += 1
        history.append(traj.total_cost)
        rows.append((it, traj.total_cost, reg, alpha))
        reg = max(reg * cfg.reg_scale_down, cfg.reg_min)
        if improvement < cfg.tol_cost:
            converged = True
            break
    T, nu = traj.actions.shape
    if gains is None:
        gains = Gains(np.zeros((T, nu)), np.zeros((T, nu, problem.nb)))
    return DDPSolution(traj, gains.feedforward, gains.feedback, values, converged, accepted,
                       history, rows)


# --------------------------------------------------------------------------
# Linear-quadratic reference problem
# --------------------------------------------------------------------------

class LinearQuadraticProblem:
    """``x' = A x + B u`` with cost ``sum(x'Qx + u'Ru)/2 + x_T' Qf x_T / 2``.

    With ``frozen_cov`` the state is embedded in belief space as
    ``[x; vec(Sigma)]`` where ``Sigma`` is carried unchanged.
    """

    u_bounds = None

    def __init__(self, A, B, Q, R, Qf=None, frozen_cov: np.ndarray | None = None):
        self.A, self.B = np.asarray(A, float), np.asarray(B, float)
        self.Q, self.R = np.asarray(Q, float), np.asarray(R, float)
        self.Qf = self.Q if Qf is None else np.asarray(Qf, float)
        self.nx, self.nu = self.B.shape
        self.cov = None if frozen_cov is None else np.asarray(frozen_cov, float)
        self.nb = self.nx + (0 if self.cov is None else self.nx ** 2)

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return x if self.cov is None else np.concatenate([x, self.cov.ravel()])

    def _blocks(self):
        nb, nx = self.nb, self.nx
        Fb = np.eye(nb)
        Fb[:nx, :nx] = self.A
        Fu = np.zeros((nb, self.nu))
        Fu[:nx] = self.B
        return Fb, Fu

    def rollout(self, b0, U_nom, B_nom, kff, Kfb, alpha):
        Fb, Fu = self._blocks()
        T = len(U_nom)
        B = np.empty((T + 1, self.nb))
        U = np.empty_like(U_nom)
        B[0] = b0
        for t in range(T):
            U[t] = U_nom[t] + alpha * kff[t] + Kfb[t] @ (B[t] - B_nom[t])
            B[t + 1] = Fb @ B[t] + Fu @ U[t]
        return B, U

    def costs(self, B, U):
        X = B[:, :self.nx]
        run = 0.5 * (np.einsum("ti,ij,tj->t", X[:-1], self.Q, X[:-1])
                     + np.einsum("ti,ij,tj->t", U, self.R, U))
        return run, 0.5 * X[-1] @ self.Qf @ X[-1]

    def linearize(self, B, U):
        Fb, Fu = self._blocks()
        T = len(U)
        return np.broadcast_to(Fb, (T,) + Fb.shape), np.broadcast_to(Fu, (T,) + Fu.shape)

    def expand(self, B, U):
        T, nx, nb = len(U), self.nx, self.nb
        run, term = self.costs(B, U)
        X = B[:, :nx]
        Lb = np.zeros((T, nb))
        Lb[:, :nx] = X[:-1] @ self.Q
        Lbb = np.zeros((T, nb, nb))
        Lbb[:, :nx, :nx] = self.Q
        exp = CostExpansion(run, Lb, U @ self.R, Lbb, np.zeros((T, self.nu, nb)),
                            np.broadcast_to(self.R, (T, self.nu, self.nu)).copy())
        Vb = np.zeros(nb)
        Vb[:nx] = self.Qf @ X[-1]
        Vbb = np.zeros((nb, nb))
        Vbb[:nx, :nx] = self.Qf
        return exp, (term, Vb, Vbb)


def riccati_lqr(A, B, Q, R, Qf, T: int):
    """Finite-horizon discrete Riccati recursion: gains ``K_t`` (u = K x) and ``P_0``."""
    P = np.asarray(Qf, float)
    gains = [None] * T
    for t in range(T - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A + B @ K)
        P = 0.5 * (P + P.T)
        gains[t] = K
    return gains, P


# --------------------------------------------------------------------------
# Belief dynamics through the learned model
# --------------------------------------------------------------------------

def _fuse(dyn: DynamicsModel):
    """Pack every output into flat arrays; multi-output models repeat their feature block."""
    blocks = []
    for mdl in dyn.models:
        for j in range(mdl.n_outputs):
            blocks.append((mdl, j))
    m_max = max(mdl.hyper.m for mdl, _ in blocks)
    off = np.zeros(len(blocks) + 1, dtype=np.int64)
    W, ac, as_ = [], [], []
    chol = np.zeros((len(blocks), 2 * m_max, 2 * m_max))
    sk = np.empty(len(blocks))
    sn2 = np.empty(len(blocks))
    for o, (mdl, j) in enumerate(blocks):
        m = mdl.hyper.m
        off[o + 1] = off[o] + m
        W.append(mdl.freqs)
        ac.append(mdl.weight_mean[:m, j])
        as_.append(mdl.weight_mean[m:, j])
        chol[o, :2 * m, :2 * m] = mdl.chol
        sk[o] = mdl.hyper.sigma_k
        sn2[o] = mdl.hyper.sigma_n ** 2
    return (np.ascontiguousarray(np.concatenate(W)), sk, sn2, np.concatenate(ac),
            np.concatenate(as_), chol, off)


def _stacked_derivatives(dyn: DynamicsModel, Z: np.ndarray):
    outs = [predict_derivatives(m, Z) for m in dyn.models]
    g = np.concatenate([o[0] for o in outs], axis=1)
    var = np.concatenate([np.repeat(o[1][:, None], o[0].shape[1], axis=1) for o in outs], axis=1)
    jac = np.concatenate([o[2] for o in outs], axis=1)
    hess = np.concatenate([o[3] for o in outs], axis=1)
    vgrad = np.concatenate([np.repeat(o[4][:, None, :], o[0].shape[1], axis=1) for o in outs], axis=1)
    return g, var, jac, hess, vgrad


def belief_jacobians(dyn: DynamicsModel, MU: np.ndarray, SIG: np.ndarray, U: np.ndarray):
    """Analytic ``(Fb, Fu)`` of the belief map at a batch of ``(mu, Sigma, u)``.

    ``Sigma' = sym(M Sigma M^T) + diag(var(z))`` with ``M = I + dg/dx``, so the
    covariance block needs the mean Hessian and the variance gradient.
    """
    n, ds = MU.shape
    du = U.shape[1]
    nb = ds + ds * ds
    Z = np.concatenate([MU, U], axis=1)
    _, _, jac, hess, vgrad = _stacked_derivatives(dyn, Z)
    M = np.eye(ds) + jac[:, :, :ds]
    Fb = np.zeros((n, nb, nb))
    Fu = np.zeros((n, nb, du))
    Fb[:, :ds, :ds] = M
    Fu[:, :ds] = jac[:, :, ds:]
    MM = np.einsum("nik,njl->nijkl", M, M).reshape(n, ds * ds, ds * ds)
    perm = np.arange(ds * ds).reshape(ds, ds).T.ravel()
    Fb[:, ds:, ds:] = 0.5 * (MM + MM[:, :, perm])
    P = SIG @ np.swapaxes(M, 1, 2)  # Sigma M^T
    X = np.einsum("nodk,ndp->nkop", hess[:, :, :ds], P)  # (n, z, ds, ds)
    dS = X + np.swapaxes(X, 2, 3)
    idx = np.arange(ds)
    dS[:, :, idx, idx] += np.swapaxes(vgrad, 1, 2)
    dS = dS.reshape(n, ds + du, ds * ds)
    Fb[:, ds:, :ds] = np.swapaxes(dS[:, :ds], 1, 2)
    Fu[:, ds:] = np.swapaxes(dS[:, ds:], 1, 2)
    return Fb, Fu


def _belief_map(dyn: DynamicsModel, b: np.ndarray, a: np.ndarray) -> np.ndarray:
    ds = dyn.state_dim
    bel = Belief.from_vector(b, ds)
    out = propagate_belief(dyn, Belief(bel.mu, 0.5 * (bel.sigma + bel.sigma.T)), a, check=False)
    return out.vector()


def linearize_belief_dynamics(models, b, a, method: str = "analytic", eps: float = 1e-6):
    """Jacobians of the belief update w.r.t. ``b = [mu; vec(Sigma)]`` and the action.

    ``method="fd"`` uses central differences on :func:`propagate_belief`
    (perturbing ``Sigma`` symmetrically, entry by entry); ``"analytic"``
    uses closed-form SSGP derivatives.
    """
    dyn = as_dynamics(models)
    ds = dyn.state_dim
    if isinstance(b, Belief):
        b = b.vector()
    b = np.asarray(b, dtype=float)
    a = a.as_array() if hasattr(a, "as_array") else np.asarray(a, dtype=float)
    if method == "analytic":
        Fb, Fu = belief_jacobians(dyn, b[None, :ds], b[None, ds:].reshape(1, ds, ds), a[None])
        return Fb[0], Fu[0]
    if method != "fd":
        raise ValueError(f"unknown method {method!r}")
    nb = b.size
    Fb = np.empty((nb, nb))
    Fu = np.empty((nb, a.size))
    for j in range(nb):
        db = np.zeros(nb)
        db[j] = eps
        try:
            Fb[:, j] = (_belief_map(dyn, b + db, a) - _belief_map(dyn, b - db, a)) / (2 * eps)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise RuntimeError(f"propagation failed at perturbed belief component {j}") from exc
    for j in range(a.size):
        da = np.zeros(a.size)
        da[j] = eps
        Fu[:, j] = (_belief_map(dyn, b, a + da) - _belief_map(dyn, b, a - da)) / (2 * eps)
    # The map symmetrizes Sigma, so the columns of an (i, j) / (j, i) pair are shared.
    return Fb, Fu


class BeliefProblem:
    """Expected driving cost over Gaussian beliefs propagated by the learned model."""

    def __init__(self, dynamics, weights: CostWeights, track_model: TrackModel,
                 u_bounds=(-1.0, 1.0)):
        self.dyn = as_dynamics(dynamics)
        self.cost = TaskCost(weights, track_model)
        self.ds = self.dyn.state_dim
        self.nu = self.dyn.action_dim
        self.nb = self.ds + self.ds ** 2
        lo, hi = u_bounds
        self.u_bounds = (np.full(self.nu, float(lo)), np.full(self.nu, float(hi)))
        self._fused = _fuse(self.dyn)
        self._cholT = np.ascontiguousarray(np.swapaxes(self._fused[5], 1, 2))
        self._grids = _kernels.derivative_grids(self.cost._pos_grid)
        self._params = _kernels.cost_params(weights, SLIP_EPS)

    def initial_belief(self, state, sigma0: float = SIGMA0) -> np.ndarray:
        x = state.as_array() if hasattr(state, "as_array") else np.asarray(state, dtype=float)
        return np.concatenate([x, (sigma0 * np.eye(self.ds)).ravel()])

    def rollout(self, b0, U_nom, B_nom, kff, Kfb, alpha):
        lo, hi = self.u_bounds
        return _kernels.belief_rollout(np.ascontiguousarray(b0, dtype=float),
                               np.ascontiguousarray(U_nom, dtype=float),
                               np.ascontiguousarray(B_nom, dtype=float),
                               np.ascontiguousarray(kff, dtype=float),
                               np.ascontiguousarray(Kfb, dtype=float),
                               float(alpha), lo, hi, *self._fused)

    def _split(self, B):
        return B[:, :self.ds], B[:, self.ds:].reshape(-1, self.ds, self.ds)

    def costs(self, B, U):
        mu, sig = self._split(B)
        U_ext = np.vstack([U, np.zeros((1, self.nu))])
        L = _kernels.expected_costs(np.ascontiguousarray(mu), np.ascontiguousarray(sig), U_ext,
                                    self._grids, self._params)
        return L[:-1], float(L[-1])

    def linearize(self, B, U):
        return _kernels.belief_jacobians(np.ascontiguousarray(B[:-1]), np.ascontiguousarray(U),
                                         *self._fused, self._cholT)

    def expand(self, B, U):
        mu, sig = self._split(B)
        U_ext = np.vstack([U, np.zeros((1, self.nu))])
        e = CostExpansion(*_kernels.cost_expansion(np.ascontiguousarray(mu),
                                                    np.ascontiguousarray(sig), U_ext,
                                                    self._grids, self._params))
        T = len(U)
        run = CostExpansion(e.L0[:T], e.Lb[:T], e.Lu[:T], e.Lbb[:T], e.Lub[:T], e.Luu[:T])
        return run, (float(e.L0[T]), e.Lb[T], e.Lbb[T])


# --------------------------------------------------------------------------
# Receding-horizon expert
# --------------------------------------------------------------------------

def shift_warm_start(actions: np.ndarray) -> np.ndarray:
    """``(a1, ..., aT) -> (a2, ..., aT, aT)``."""
    actions = np.asarray(actions, dtype=float)
    return np.concatenate([actions[1:], actions[-1:]], axis=0)


def mpc_step(problem: BeliefProblem, state_estimate: VehicleState, warm,
             config: DDPConfig | None = None):
    """Plan from ``state_estimate`` and return ``(first action, solution)``.

    ``warm`` is the previous :class:`DDPSolution`, an action array to use as
    is, or ``None`` for a zero-action start. On solver failure the warm-start
    first action is returned and the solution is flagged ``degraded``.
    """
    cfg = config or DDPConfig()
    if isinstance(warm, DDPSolution):
        u_init = shift_warm_start(warm.actions)
    elif warm is None:
        u_init = np.zeros((cfg.T_h, problem.nu))
    else:
        u_init = np.asarray(warm, dtype=float)
    b0 = problem.initial_belief(state_estimate)
    try:
        sol = ddp_solve(problem, b0, u_init, cfg)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("MPC solve failed (%s); using warm start", exc)
        traj = BeliefTrajectory(np.tile(b0, (len(u_init) + 1, 1)), np.clip(u_init, -1, 1),
                                np.zeros(len(u_init)), 0.0)
        sol = DDPSolution(traj, np.zeros_like(u_init), np.zeros((len(u_init), problem.nu, problem.nb)),
                          [], False, 0, degraded=True)
    a = sol.actions[0]
    return Action(float(a[0]), float(a[1])), sol


class MPCExpert:
    """Stateful expert ``state -> Action`` that warm-starts from its previous plan."""

    def __init__(self, dynamics, weights: CostWeights, track_model: TrackModel,
                 config: DDPConfig | None = None):
        self.problem = BeliefProblem(dynamics, weights, track_model)
        self.config = config or DDPConfig()
        self.last: DDPSolution | None = None
        self.n_calls = 0
        self.n_degraded = 0

    def reset(self) -> None:
        self.last = None

    def __call__(self, state: VehicleState) -> Action:
        a, sol = mpc_step(self.problem, state, self.last, self.config)
        self.last = sol
        self.n_calls += 1
        self.n_degraded += sol.degraded
        return a
