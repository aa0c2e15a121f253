import csv

import numpy as np
import pytest

from ildrive.ddp import (BeliefProblem, DDPConfig, LinearQuadraticProblem, MPCExpert,
                         backward_pass, ddp_solve, forward_pass, initial_trajectory,
                         linearize_belief_dynamics, mpc_step, riccati_lqr, shift_warm_start)
from ildrive.sim import VehicleState
from ildrive.ssgp import Belief, DynamicsModel, SSGPHyper, fit_posterior, propagate_belief

DT = 0.1
A_DI = np.array([[1.0, DT], [0.0, 1.0]])
B_DI = np.array([[0.5 * DT ** 2], [DT]])
Q_DI = np.diag([1.0, 0.1])
R_DI = np.array([[0.01]])
QF_DI = np.diag([10.0, 1.0])
X0 = np.array([1.0, -0.5])


def _riccati_cost(x0, T=50):
    gains, P0 = riccati_lqr(A_DI, B_DI, Q_DI, R_DI, QF_DI, T)
    return gains, 0.5 * x0 @ P0 @ x0


def _riccati_controls(x0, gains):
    x, U = x0.copy(), []
    for K in gains:
        u = K @ x
        U.append(u)
        x = A_DI @ x + B_DI @ u
    return np.array(U)


# -- linear-quadratic equivalence -------------------------------------------

@pytest.mark.parametrize("frozen", [False, True])
def test_matches_riccati(frozen):
    cov = np.diag([0.3, 0.2]) if frozen else None
    prob = LinearQuadraticProblem(A_DI, B_DI, Q_DI, R_DI, QF_DI, frozen_cov=cov)
    sol = ddp_solve(prob, prob.embed(X0), np.zeros((50, 1)), DDPConfig(T_h=50))
    gains, cost = _riccati_cost(X0)
    assert sol.converged
    assert sol.nominal.total_cost == pytest.approx(cost, abs=1e-6)
    for t, K in enumerate(gains):
        assert np.allclose(sol.feedback[t][:, :2], K, rtol=0, atol=1e-8)
    assert np.allclose(sol.feedback[:, :, 2:], 0.0)
    # the loop stops once the predicted gain falls under tol_cost, so controls
    # agree only to the accuracy that tolerance buys
    assert np.allclose(sol.actions, _riccati_controls(X0, gains), atol=1e-3)


def test_optimal_warm_start_takes_no_step():
    gains, cost = _riccati_cost(X0)
    prob = LinearQuadraticProblem(A_DI, B_DI, Q_DI, R_DI, QF_DI)
    sol = ddp_solve(prob, X0, _riccati_controls(X0, gains), DDPConfig(T_h=50))
    assert sol.converged and sol.iterations == 0
    assert sol.cost_history == [pytest.approx(cost, abs=1e-12)]


def test_zero_cost_gives_zero_gains():
    prob = LinearQuadraticProblem(A_DI, B_DI, np.zeros((2, 2)), np.eye(1), np.zeros((2, 2)))
    exp, term = prob.expand(np.zeros((11, 2)), np.zeros((10, 1)))
    Fb, Fu = prob.linearize(np.zeros((11, 2)), np.zeros((10, 1)))
    g = backward_pass(exp, term, Fb, Fu, 1e-6)
    assert np.all(g.feedforward == 0) and np.all(g.feedback == 0)


def test_large_regularization_shrinks_step():
    prob = LinearQuadraticProblem(A_DI, B_DI, Q_DI, R_DI, QF_DI)
    traj = initial_trajectory(prob, X0, np.zeros((20, 1)))
    exp, term = prob.expand(traj.beliefs, traj.actions)
    Fb, Fu = prob.linearize(traj.beliefs, traj.actions)
    small = backward_pass(exp, term, Fb, Fu, 1e-6).feedforward
    large = backward_pass(exp, term, Fb, Fu, 1e6).feedforward
    assert np.linalg.norm(large) < 1e-3 * np.linalg.norm(small)


def test_zero_step_forward_pass_reproduces_nominal():
    prob = LinearQuadraticProblem(A_DI, B_DI, Q_DI, R_DI, QF_DI)
    rng = np.random.default_rng(0)
    traj = initial_trajectory(prob, X0, rng.normal(size=(20, 1)))
    exp, term = prob.expand(traj.beliefs, traj.actions)
    Fb, Fu = prob.linearize(traj.beliefs, traj.actions)
    g = backward_pass(exp, term, Fb, Fu, 1e-6)
    again = forward_pass(prob, traj, g, 0.0)
    assert np.array_equal(again.beliefs, traj.beliefs)
    assert again.total_cost == traj.total_cost


def test_expected_change_is_quadratic_model():
    prob = LinearQuadraticProblem(A_DI, B_DI, Q_DI, R_DI, QF_DI)
    traj = initial_trajectory(prob, X0, np.zeros((30, 1)))
    exp, term = prob.expand(traj.beliefs, traj.actions)
    Fb, Fu = prob.linearize(traj.beliefs, traj.actions)
    g = backward_pass(exp, term, Fb, Fu, 1e-12)
    # on an LQ problem the predicted change is exact for any step size
    for alpha in (1.0, 0.5, 0.25):
        new = forward_pass(prob, traj, g, alpha)
        assert new.total_cost - traj.total_cost == pytest.approx(g.expected_change(alpha), abs=1e-9)


def test_config_validation():
    for bad in (dict(T_h=0), dict(reg_min=0.0), dict(reg_init=1e7),
                dict(line_search_alphas=()), dict(line_search_alphas=(0.5, 1.0)),
                dict(line_search_alphas=(1.0, 0.0))):
        with pytest.raises(ValueError):
            DDPConfig(**bad)
    assert DDPConfig().line_search_alphas == (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625)


# -- driving problem ---------------------------------------------------------

@pytest.fixture(scope="module")
def problem(world, toy_dynamics):
    return BeliefProblem(toy_dynamics, world.weights, world.track_model)


def _start(world):
    p = world.track.centerline[0]
    t = world.track.centerline[1] - p
    return VehicleState(p[0], p[1], float(np.arctan2(t[1], t[0])), 4.0, 0.0, 0.0)


def test_accepted_costs_strictly_decrease(world, problem, tmp_path):
    cfg = DDPConfig(T_h=40, max_iters=30)
    sol = ddp_solve(problem, problem.initial_belief(_start(world)), np.zeros((40, 2)), cfg)
    assert sol.iterations >= 2
    assert all(b < a for a, b in zip(sol.cost_history, sol.cost_history[1:]))
    assert np.all(np.isfinite(sol.feedback)) and np.all(np.isfinite(sol.feedforward))
    assert np.all(np.abs(sol.actions) <= 1.0)
    sol.write_log(tmp_path / "log.csv")
    rows = list(csv.reader((tmp_path / "log.csv").open()))
    assert rows[0] == ["iteration", "cost", "reg", "alpha_accepted"]
    accepted = [float(r[1]) for r in rows[1:] if float(r[3]) > 0 or r[0] == "0"]
    assert accepted == pytest.approx(sol.cost_history)


def test_gains_factorize_at_every_step(world, problem):
    cfg = DDPConfig(T_h=30, max_iters=10)
    sol = ddp_solve(problem, problem.initial_belief(_start(world)), np.zeros((30, 2)), cfg)
    exp, term = problem.expand(sol.nominal.beliefs, sol.actions)
    Fb, Fu = problem.linearize(sol.nominal.beliefs, sol.actions)
    g = backward_pass(exp, term, Fb, Fu, cfg.reg_max)  # raises if any step fails
    assert np.all(np.isfinite(g.feedback))


def test_mpc_step_returns_first_action(world, problem):
    cfg = DDPConfig(T_h=30, max_iters=5)
    a, sol = mpc_step(problem, _start(world), None, cfg)
    assert (a.steering, a.throttle) == tuple(sol.actions[0])
    assert not sol.degraded


def test_mpc_is_deterministic(world, problem):
    cfg = DDPConfig(T_h=30, max_iters=5)
    warm = np.random.default_rng(4).uniform(-0.3, 0.3, (30, 2))
    a1, s1 = mpc_step(problem, _start(world), warm, cfg)
    a2, s2 = mpc_step(problem, _start(world), warm.copy(), cfg)
    assert a1 == a2 and np.array_equal(s1.actions, s2.actions)


def test_mpc_failure_falls_back_to_warm_start(problem):
    warm = np.full((10, 2), 0.25)
    bad = np.array([np.nan, 0.0, 0.0, 3.0, 0.0, 0.0])
    a, sol = mpc_step(problem, bad, warm, DDPConfig(T_h=10))
    assert sol.degraded and (a.steering, a.throttle) == (0.25, 0.25)


def test_expert_warm_starts_from_previous_plan(world, toy_dynamics):
    expert = MPCExpert(toy_dynamics, world.weights, world.track_model, DDPConfig(T_h=20, max_iters=3))
    expert(_start(world))
    first = expert.last
    expert(_start(world))
    assert expert.n_calls == 2 and expert.last is not first
    expert.reset()
    assert expert.last is None


def test_shift_warm_start():
    seq = np.arange(1, 101, dtype=float)[:, None] * np.ones((1, 2))
    out = shift_warm_start(seq)
    assert np.array_equal(out[:99], seq[1:]) and np.array_equal(out[99], seq[99])


# -- belief linearization ----------------------------------------------------

def _random_belief(rng, spread=0.05):
    mu = np.array([rng.uniform(-10, 10), rng.uniform(-6, 6), rng.uniform(-3, 3),
                   rng.uniform(2, 7), rng.normal(0, 0.2), rng.normal(0, 0.4)])
    A = rng.normal(size=(6, 6)) * spread
    return Belief(mu, A @ A.T + 1e-4 * np.eye(6))


def test_analytic_linearization_matches_finite_differences(toy_dynamics):
    rng = np.random.default_rng(11)
    for _ in range(4):
        b = _random_belief(rng)
        a = rng.uniform(-1, 1, 2)
        Fb, Fu = linearize_belief_dynamics(toy_dynamics, b, a)
        Fb_fd, Fu_fd = linearize_belief_dynamics(toy_dynamics, b, a, method="fd")
        # FD perturbs single entries of Sigma; the analytic map sees the
        # symmetrized input, so compare column pairs summed over (i, j) / (j, i)
        perm = np.arange(36).reshape(6, 6).T.ravel()
        sym = lambda F: F[:, 6:] + F[:, 6:][:, perm]  # noqa: E731
        assert np.allclose(Fb[:, :6], Fb_fd[:, :6], atol=1e-7)
        assert np.allclose(sym(Fb), sym(Fb_fd), atol=1e-7)
        assert np.allclose(Fu, Fu_fd, atol=1e-7)


def test_linear_model_mean_jacobian_is_identity_plus_B():
    B = np.array([[0.1, -0.2], [0.05, 0.15]])
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, size=(2000, 3))
    model = fit_posterior(X, X[:, :2] @ B.T, SSGPHyper(40, 30.0, 1e-4, (40.0,) * 3), freq_seed=1)
    dyn = DynamicsModel([model], 2, 1)
    Fb, _ = linearize_belief_dynamics(dyn, Belief(np.array([0.2, -0.1]), 0.01 * np.eye(2)), [0.0])
    assert np.allclose(Fb[:2, :2], np.eye(2) + B, atol=5e-3)


def test_ignored_action_has_no_effect():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 3))
    Y = np.sin(X[:, :2])
    # infinite lengthscale on the action input removes it from the features
    model = fit_posterior(X, Y, SSGPHyper(15, 1.0, 0.1, (1.0, 1.0, np.inf)))
    dyn = DynamicsModel([model], 2, 1)
    _, Fu = linearize_belief_dynamics(dyn, Belief(np.zeros(2), 0.1 * np.eye(2)), [0.4])
    assert np.allclose(Fu, 0.0, atol=1e-14)


def test_linearization_remainder_is_second_order(toy_dynamics):
    rng = np.random.default_rng(5)
    for _ in range(3):
        b = _random_belief(rng)
        a = rng.uniform(-1, 1, 2)
        Fb, Fu = linearize_belief_dynamics(toy_dynamics, b, a)
        d = rng.normal(size=6)
        S = rng.normal(size=(6, 6))
        dS = 0.01 * (S + S.T)
        du = rng.normal(size=2)
        base = propagate_belief(toy_dynamics, b, a).vector()
        errs = []
        for eps in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
            db = np.concatenate([eps * d, eps * dS.ravel()])
            nxt = propagate_belief(toy_dynamics, Belief(b.mu + eps * d, b.sigma + eps * dS),
                                   a + eps * du, check=False).vector()
            errs.append(np.linalg.norm(nxt - base - Fb @ db - Fu @ (eps * du)))
        ratios = [e0 / e1 for e0, e1 in zip(errs, errs[1:])]
        assert all(3.2 < r < 4.8 for r in ratios), ratios


def test_fd_linearization_rejects_unknown_method(toy_dynamics):
    with pytest.raises(ValueError):
        linearize_belief_dynamics(toy_dynamics, _random_belief(np.random.default_rng(0)),
                                  np.zeros(2), method="spline")
