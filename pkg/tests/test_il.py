import csv
import json

import numpy as np
import pytest

from ildrive.il import (TABLE_COLUMNS, CollectConfig, CollectionError, EvalMetrics,
                        ImitationDataset, TabularMDP, TrainConfig, best_iteration,
                        check_equal_data, collect_samples, evaluate_policy, mixing_probability,
                        performance_difference_check, policy_cost, q_values, run_batch_il,
                        run_dagger, state_distributions, write_manifest, write_metrics_csv)
from ildrive.sim import Action, CenterlineTracker, Trajectory

TINY_TRAIN = TrainConfig(epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def tracker(world):
    return CenterlineTracker(world.track, target_speed=4.0)


# -- mixing schedule ---------------------------------------------------------

def test_mixing_schedule():
    assert [mixing_probability(i, 0.6) for i in (1, 2, 3)] == [0.6, 0.36, 0.6 ** 3]
    assert mixing_probability(3, 0.6) == pytest.approx(0.216, abs=1e-15)
    assert mixing_probability(0, 0.6) == 1.0
    assert mixing_probability(2, 0.0) == 0.0
    assert mixing_probability(0, 0.0) == 1.0
    for bad in ((1, -0.1), (1, 1.5), (-1, 0.5)):
        with pytest.raises(ValueError):
            mixing_probability(*bad)


# -- dataset -----------------------------------------------------------------

def test_dataset_is_append_only_with_frozen_stats(rng):
    ds = ImitationDataset()
    X0 = rng.normal(size=(10, 20))
    ds.add(X0, rng.normal(size=(10, 2)), 0)
    stats = ds.normalization_stats
    X_before, _ = ds.arrays()
    ds.add(rng.normal(size=(5, 20)) + 100, rng.normal(size=(5, 2)), 1)
    X_after, _ = ds.arrays()
    assert len(ds) == 15 and ds.count(0) == 10 and ds.count(1) == 5
    assert np.array_equal(X_after[:10], X_before)
    assert ds.normalization_stats is stats
    assert np.allclose(stats[0], X0.mean(0))


def test_dataset_rejects_mismatched_rows(rng):
    with pytest.raises(ValueError):
        ImitationDataset().add(np.zeros((3, 20)), np.zeros((2, 2)), 0)


def test_dataset_csv(tmp_path, rng):
    ds = ImitationDataset()
    X, A = rng.normal(size=(4, 20)), rng.normal(size=(4, 2))
    ds.add(X, A, 2)
    ds.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader((tmp_path / "d.csv").open()))
    assert rows[0] == ["iteration"] + [f"obs_{k}" for k in range(20)] + ["steer_expert",
                                                                         "throttle_expert"]
    back = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.array_equal(back[:, :20], X) and np.array_equal(back[:, 20:], A)
    assert {r[0] for r in rows[1:]} == {"2"}


# -- metrics -----------------------------------------------------------------

def test_eval_metrics_consistency():
    m = EvalMetrics(5.0, 6.0, 0.5, 0.2, 0.1, 3)
    assert m.total_loss == pytest.approx(0.15)
    row = m.row("batch", 6000)
    assert tuple(row) == TABLE_COLUMNS and row["training_data"] == 6000
    with pytest.raises(ValueError):
        EvalMetrics(5.0, 6.0, 1.5, 0.2, 0.1, 3)


def test_crash_halfway_is_half_completion():
    tr = Trajectory(horizon=3000)
    tr.states.extend([None] * 1500)
    tr.crashed_at = 1500
    assert tr.completion_ratio == 0.5


def test_expert_scored_against_itself(world, tracker):
    m = evaluate_policy(None, world, n_rollouts=2, T=300, expert=tracker,
                        rng=np.random.default_rng(0))
    assert m.completion_ratio == 1.0 and m.total_loss == 0.0
    assert 0 < m.avg_speed <= m.top_speed


def test_evaluation_needs_expert(world):
    with pytest.raises(ValueError):
        evaluate_policy(None, world, 1, 10)


def test_crashing_learner_lowers_completion(world, tracker):
    hard_left = lambda obs: Action(1.0, 1.0)  # noqa: E731
    m = evaluate_policy(hard_left, world, n_rollouts=1, T=1000, expert=tracker,
                        rng=np.random.default_rng(0))
    assert m.completion_ratio < 1.0 and m.steering_loss > 0


def test_metrics_csv(tmp_path):
    rows = [EvalMetrics(5.0, 6.0, 1.0, 0.2, 0.1, 3).row("expert", "-")]
    write_metrics_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(TABLE_COLUMNS)
    assert lines[1].startswith("expert,5.0,6.0,-,1.0,")


# -- collection and IL loops -------------------------------------------------

def test_pure_expert_collection_labels_equal_actions(world, tracker):
    X, A, who = collect_samples(tracker, world, 250, 1.0, None, np.random.default_rng(1),
                                CollectConfig(100, 0))
    assert X.shape == (250, 20) and A.shape == (250, 2)
    assert who == ["expert"] * 250


def test_collection_gives_up_after_repeated_crashes(world, tracker):
    hard_left = lambda obs: Action(1.0, 1.0)  # noqa: E731
    with pytest.raises(CollectionError):
        collect_samples(tracker, world, 2000, 0.0, hard_left, np.random.default_rng(1),
                        CollectConfig(2000, 2))


def test_batch_il_dataset(world, tracker):
    res, data = run_batch_il(tracker, world, 400, TINY_TRAIN, seed=0,
                             collect_cfg=CollectConfig(200, 0), eval_rollouts=1, eval_T=50)
    assert res.name == "batch" and len(data) == res.dataset_size == 400
    assert res.expert_fraction == 1.0 and data.count(0) == 400
    assert len(res.epoch_losses) == 2


def test_dagger_growth_and_mixing(world, tracker):
    results, data = run_dagger(tracker, world, n_iters=2, samples_per_iter=400, beta=0.6,
                               train_cfg=TINY_TRAIN, seed=3, collect_cfg=CollectConfig(40, 200),
                               eval_rollouts=1, eval_T=50)
    assert [r.name for r in results] == ["online_0", "online_1", "online_2"]
    assert [r.dataset_size for r in results] == [400, 800, 1200]
    assert [data.count(i) for i in range(3)] == [400, 400, 400]
    assert results[0].expert_fraction == 1.0
    assert abs(results[1].expert_fraction - 0.6) < 0.1
    assert abs(results[2].expert_fraction - 0.36) < 0.1
    assert best_iteration(results) in (0, 1, 2)


def test_dagger_reuses_initial_data(world, tracker, rng):
    X, A = rng.normal(size=(500, 20)), rng.uniform(-1, 1, (500, 2))
    results, data = run_dagger(tracker, world, n_iters=1, samples_per_iter=300,
                               train_cfg=TINY_TRAIN, seed=0, collect_cfg=CollectConfig(100, 50),
                               eval_rollouts=1, eval_T=20, initial_data=(X, A),
                               evaluate_initial=False)
    assert results[0].metrics is None and results[1].metrics is not None
    Xd, Ad = data.arrays()
    assert np.array_equal(Xd[:300], X[:300]) and np.array_equal(Ad[:300], A[:300])
    assert best_iteration(results) == 1


def test_equal_data_check():
    check_equal_data(6000, 6000)
    with pytest.raises(AssertionError):
        check_equal_data(6000, 4500)


def test_manifest(tmp_path, world, tracker):
    res, _ = run_batch_il(tracker, world, 100, TINY_TRAIN, collect_cfg=CollectConfig(100, 0),
                          eval_rollouts=1, eval_T=10)
    write_manifest(tmp_path / "m.json", "abc", {"batch": 1}, [res], {"note": 1})
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["config_hash"] == "abc" and d["iterations"][0]["dataset_size"] == 100
    assert d["note"] == 1


# -- performance difference identity -----------------------------------------

def test_identity_when_policies_coincide():
    mdp = TabularMDP.random(np.random.default_rng(0))
    mdp.pi_prime = mdp.pi.copy()
    lhs, rhs, diff = performance_difference_check(mdp)
    assert diff < 1e-12 and lhs == pytest.approx(policy_cost(mdp, mdp.pi))


def test_hand_worked_deterministic_mdp():
    # two states, action k moves to state k; cost c[s, a]
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    c = np.array([[1.0, 2.0], [0.0, 3.0]])
    stay0 = np.array([[1.0, 0.0], [1.0, 0.0]])
    go1 = np.array([[0.0, 1.0], [0.0, 1.0]])
    mdp = TabularMDP(P, c, 3, go1, stay0, np.array([1.0, 0.0]))
    # go1 from state 0: 2 + 3 + 3; stay0 from state 0: 1 + 1 + 1
    assert policy_cost(mdp, go1) == 8.0 and policy_cost(mdp, stay0) == 3.0
    Q, V = q_values(mdp, stay0)
    assert V[0, 0] == 3.0 and Q[0, 0, 1] == 2.0 + 0.0 + 1.0
    assert np.allclose(state_distributions(mdp, go1), [[1, 0], [0, 1], [0, 1]])
    lhs, rhs, diff = performance_difference_check(mdp)
    assert lhs == 8.0 and diff < 1e-12


def test_identity_on_random_mdps():
    rng = np.random.default_rng(42)
    for _ in range(50):
        mdp = TabularMDP.random(rng, int(rng.integers(2, 7)), int(rng.integers(2, 5)),
                                int(rng.integers(1, 12)))
        assert performance_difference_check(mdp)[2] < 1e-9


def test_mdp_validation():
    mdp = TabularMDP.random(np.random.default_rng(0))
    with pytest.raises(ValueError):
        TabularMDP(mdp.P * 2, mdp.cost, 3, mdp.pi, mdp.pi_prime, mdp.init)
    with pytest.raises(ValueError):
        TabularMDP(mdp.P, mdp.cost, 0, mdp.pi, mdp.pi_prime, mdp.init)
    with pytest.raises(ValueError):
        TabularMDP(mdp.P, mdp.cost, 3, mdp.pi[:, :2], mdp.pi_prime, mdp.init)
