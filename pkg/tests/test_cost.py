import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ildrive.cost import (CostWeights, TaskCost, TrackFitError, TrackModel,
                          check_covariance, expected_cost_expansion, fit_track_model,
                          instantaneous_cost, position_cost)
from ildrive.sim import Action, VehicleState, World
from ildrive.ssgp import Belief

_MODEL = World.default().track_model


def _spd(rng, n=6, scale=0.05):
    A = rng.normal(size=(n, n)) * scale
    return A @ A.T + 1e-4 * np.eye(n)


# -- track model -------------------------------------------------------------

def test_fit_recovers_known_polynomial(rng):
    # 200 scattered points on the -1 and +1 level sets of a known bicubic
    # (0.02 x^2 + 0.01 y^2 - 2) are fit exactly, coefficients included
    coeffs = np.zeros(16)
    coeffs[0], coeffs[2], coeffs[8] = -2.0, 0.01, 0.02
    truth = TrackModel(tuple(coeffs))
    th = rng.uniform(0, 2 * np.pi, 100)
    d = np.stack([np.cos(th), np.sin(th)], 1)

    def radius(level):
        return np.sqrt((level + 2) / (0.02 * d[:, 0] ** 2 + 0.01 * d[:, 1] ** 2))

    model = fit_track_model(radius(-1)[:, None] * d, radius(1)[:, None] * d)
    assert np.allclose(model.coeffs, truth.coeffs, atol=1e-8)
    assert model.fit_residual_max < 1e-9
    assert model.n_points == 200


def test_midpoints_near_zero(world):
    mid = 0.5 * (world.track.inner_boundary + world.track.outer_boundary)
    assert np.max(np.abs(position_cost(world.track_model, *mid.T))) < 0.15


def test_too_few_points_rejected():
    with pytest.raises(TrackFitError):
        fit_track_model(np.zeros((5, 2)), np.ones((5, 2)))


def test_collinear_points_rejected():
    t = np.linspace(0, 1, 20)
    line = np.stack([t, 2 * t], 1)
    with pytest.raises(TrackFitError):
        fit_track_model(line[:10], line[10:])


def test_boundary_labels_recovered(world):
    m = world.track_model
    assert abs(np.mean(position_cost(m, *world.track.inner_boundary.T)) + 1) <= m.fit_residual_max + 1e-9
    assert abs(np.mean(position_cost(m, *world.track.outer_boundary.T)) - 1) <= m.fit_residual_max + 1e-9


def test_position_cost_examples():
    zero = TrackModel(tuple([0.0] * 16))
    one = TrackModel(tuple([1.0] + [0.0] * 15))
    ones = TrackModel(tuple([1.0] * 16))
    assert position_cost(zero, 3.0, -2.0) == 0.0
    assert position_cost(one, 3.0, -2.0) == 1.0
    assert position_cost(ones, 1.0, 1.0) == 16.0


def test_position_cost_matches_monomials(rng):
    c = rng.normal(size=16)
    m = TrackModel(tuple(c))
    x, y = rng.normal(size=2)
    direct = sum(c[4 * i + j] * x ** i * y ** j for i in range(4) for j in range(4))
    assert position_cost(m, x, y) == pytest.approx(direct, rel=1e-12)


def test_track_model_rejects_bad_coeffs():
    with pytest.raises(ValueError):
        TrackModel(tuple([0.0] * 15))
    with pytest.raises(ValueError):
        TrackModel(tuple([np.inf] + [0.0] * 15))


def test_track_model_json_roundtrip(tmp_path, world):
    world.track_model.to_json(tmp_path / "m.json")
    assert TrackModel.from_json(tmp_path / "m.json") == world.track_model


# -- instantaneous cost ------------------------------------------------------

def _center_state(world, vx, vy=0.0):
    p = world.track.centerline[0]
    return VehicleState(p[0], p[1], 0.0, vx, vy, 0.0)


def test_cost_zero_on_center_at_target_speed(world):
    w = CostWeights()
    assert instantaneous_cost(_center_state(world, w.v_desired), Action(), w, world.track_model) \
        == pytest.approx(0.0, abs=1e-20)


def test_speed_term(world):
    w = CostWeights()
    c = instantaneous_cost(_center_state(world, w.v_desired - 1), Action(), w, world.track_model)
    assert c == pytest.approx(1.0, abs=1e-12)


def test_slip_term(world):
    w = CostWeights(alpha1=0.0, alpha2=0.0)
    c = instantaneous_cost(_center_state(world, 5.0, 5.0 * np.tan(0.1)), Action(), w,
                           world.track_model)
    assert c == pytest.approx(1.0, rel=1e-12)


def test_action_term_is_quadratic(world):
    w = CostWeights(alpha1=0.0, alpha2=0.0, alpha3=0.0)
    c = instantaneous_cost(_center_state(world, 1.0), Action(-0.5, 0.2), w, world.track_model)
    assert c == pytest.approx(60 * (0.25 + 0.04))


def test_slip_guard_at_rest(world):
    w = CostWeights()
    assert np.isfinite(instantaneous_cost(_center_state(world, 0.0, 0.3), Action(), w,
                                          world.track_model))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        CostWeights(alpha3=-1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-10, 10), st.floats(-3, 3),
       st.floats(-1, 1), st.floats(-1, 1))
def test_cost_non_negative(x, y, vx, vy, s, t):
    assert instantaneous_cost(np.array([x, y, 0, vx, vy, 0]), np.array([s, t]), CostWeights(),
                              _MODEL) >= 0


# -- expected cost expansion -------------------------------------------------

def _random_belief(world, rng, spread=0.05):
    k = int(rng.integers(len(world.track.centerline)))
    p = world.track.centerline[k]
    mu = np.array([p[0] + rng.normal(0, 0.3), p[1] + rng.normal(0, 0.3), rng.uniform(-3, 3),
                   rng.uniform(2, 8), rng.normal(0, 0.3), rng.normal(0, 0.5)])
    return Belief(mu, _spd(rng, scale=spread))


def test_zero_covariance_gives_point_cost(world, rng):
    w = CostWeights()
    for _ in range(5):
        b = _random_belief(world, rng)
        a = rng.uniform(-1, 1, 2)
        e = expected_cost_expansion(Belief(b.mu, np.zeros((6, 6))), a, w, world.track_model)
        assert e.L0 == pytest.approx(instantaneous_cost(b.mu, a, w, world.track_model), rel=1e-12)


def test_quadratic_cost_expectation_closed_form_and_monte_carlo(rng):
    # c_pos = x makes alpha1 c_pos^2 quadratic; with no slip weight the
    # whole cost is quadratic and the second-order expectation is exact
    coeffs = [0.0] * 16
    coeffs[4] = 1.0
    model = TrackModel(tuple(coeffs))
    w = CostWeights(alpha1=2.5, alpha2=1.0, alpha3=0.0, alpha4=60.0)
    mu = np.array([0.3, -0.2, 0.1, 6.0, 0.05, 0.1])
    S = _spd(rng, scale=0.2)
    a = np.array([0.1, -0.3])
    e = expected_cost_expansion(Belief(mu, S), a, w, model)
    closed = instantaneous_cost(mu, a, w, model) + w.alpha1 * S[0, 0] + w.alpha2 * S[3, 3]
    assert e.L0 == pytest.approx(closed, rel=1e-12)
    xs = rng.multivariate_normal(mu, S, size=10 ** 6)
    vals = (w.alpha1 * xs[:, 0] ** 2 + w.alpha2 * (xs[:, 3] - w.v_desired) ** 2
            + w.alpha4 * (a[0] ** 2 + a[1] ** 2))
    se = vals.std() / np.sqrt(len(vals))
    assert abs(vals.mean() - e.L0) < 3 * se


def _fd_check(f, x, analytic, h_scale=1e-5):
    num = np.empty_like(analytic)
    for j in range(x.size):
        h = h_scale * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        num[..., j] = (f(xp) - f(xm)) / (2 * h)
    return num


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_expansion_matches_finite_differences(world):
    rng = np.random.default_rng(3)
    w = CostWeights()
    tc = TaskCost(w, world.track_model)

    def L0(bvec, u):
        return tc.expected(bvec[:6][None], bvec[6:].reshape(1, 6, 6), u[None])[0]

    def grads(bvec, u):
        e = tc.expand(bvec[:6][None], bvec[6:].reshape(1, 6, 6), u[None])[0]
        return e.Lb, e.Lu

    for _ in range(20):
        b = _random_belief(world, rng)
        bvec = b.vector()
        u = rng.uniform(-1, 1, 2)
        e = tc.expand(b.mu[None], b.sigma[None], u[None])[0]
        assert _rel_err(e.Lb, _fd_check(lambda x: L0(x, u), bvec, np.zeros(42))) < 1e-5
        assert _rel_err(e.Lu, _fd_check(lambda x: L0(bvec, x), u, np.zeros(2))) < 1e-5
        num_bb = _fd_check(lambda x: grads(x, u)[0], bvec, np.zeros((42, 42)))
        # Lbb is the symmetrized Hessian; Sigma enters linearly so only the
        # (mu, mu) and (mu, Sigma) blocks carry information
        assert _rel_err(e.Lbb[:6], 0.5 * (num_bb[:6] + num_bb[:, :6].T)) < 1e-5
        num_uu = _fd_check(lambda x: grads(bvec, x)[1], u, np.zeros((2, 2)))
        assert _rel_err(e.Luu, num_uu) < 1e-5
        num_ub = _fd_check(lambda x: grads(x, u)[1], bvec, np.zeros((2, 42)))
        assert _rel_err(e.Lub, num_ub) < 1e-5
        assert np.allclose(e.Lbb, e.Lbb.T) and np.allclose(e.Luu, e.Luu.T)


def test_non_psd_covariance_rejected(world):
    S = np.eye(6)
    S[0, 0] = -1.0
    with pytest.raises(ValueError):
        expected_cost_expansion(Belief(np.zeros(6), S), np.zeros(2), CostWeights(), world.track_model)
    with pytest.raises(ValueError):
        check_covariance(np.triu(np.ones((6, 6))))
