"""Batch and online (DAgger) imitation learning, policy evaluation, and the performance difference identity on tabular MDPs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .policy import MLPPolicy, PolicyParams, normalization_stats, train
from .sim.world import World, rollout

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("policy", "avg_speed", "top_speed", "training_data", "completion_ratio",
                 "total_loss", "steering_loss", "throttle_loss")


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

class ImitationDataset:
    """Append-only ``(observation, expert action, iteration)`` samples.

    Normalization statistics are taken from the first batch ever added and
    never change afterwards.
    """

    def __init__(self):
        self._obs: list = []
        self._act: list = []
        self._tag: list = []
        self.normalization_stats = None

    def __len__(self) -> int:
        return sum(len(o) for o in self._obs)

    def add(self, observations, actions, iteration: int) -> None:
        X = np.atleast_2d(np.asarray(observations, dtype=float))
        A = np.atleast_2d(np.asarray(actions, dtype=float))
        if len(X) != len(A):
            raise ValueError("observation and label counts differ")
        if len(X) == 0:
            return
        if self.normalization_stats is None:
            self.normalization_stats = normalization_stats(X)
        self._obs.append(X)
        self._act.append(A)
        self._tag.append(np.full(len(X), iteration, dtype=int))

    def arrays(self):
        if not self._obs:
            return np.zeros((0, 0)), np.zeros((0, 2))
        return np.concatenate(self._obs), np.concatenate(self._act)

    @property
    def iterations(self) -> np.ndarray:
        return np.concatenate(self._tag) if self._tag else np.zeros(0, dtype=int)

    def count(self, iteration: int) -> int:
        return int(np.sum(self.iterations == iteration))

    def to_csv(self, path) -> None:
        X, A = self.arrays()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"obs_{k}" for k in range(X.shape[1])]
                       + ["steer_expert", "throttle_expert"])
            for tag, x, a in zip(self.iterations, X, A):
                w.writerow([int(tag)] + [repr(float(v)) for v in x] + [repr(float(v)) for v in a])


@dataclass(frozen=True)
class EvalMetrics:
    avg_speed: float
    top_speed: float
    completion_ratio: float
    steering_loss: float
    throttle_loss: float
    n_rollouts: int
    total_loss: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "total_loss", (self.steering_loss + self.throttle_loss) / 2.0)
        if not 0.0 <= self.completion_ratio <= 1.0:
            raise ValueError("completion ratio outside [0, 1]")

    def row(self, policy: str, training_data) -> dict:
        d = asdict(self)
        return {"policy": policy, "avg_speed": d["avg_speed"], "top_speed": d["top_speed"],
                "training_data": training_data, "completion_ratio": d["completion_ratio"],
                "total_loss": d["total_loss"], "steering_loss": d["steering_loss"],
                "throttle_loss": d["throttle_loss"]}


def mixing_probability(i: int, beta: float) -> float:
    """Probability of executing the expert during iteration ``i``: ``beta**i``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if i < 0:
        raise ValueError("iteration index must be >= 0")
    return float(beta ** i)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class CollectConfig:
    rollout_steps: int = 1500  # length of each collection rollout
    max_attempts: int = 20  # crashed rollouts tolerated per quota


class CollectionError(RuntimeError):
    def __init__(self, message: str, partial: ImitationDataset | None = None):
        super().__init__(message)
        self.partial = partial


def collect_samples(expert, world: World, n_samples: int, mix_prob: float, learner,
                    rng: np.random.Generator, cfg: CollectConfig = CollectConfig(),
                    stats: dict | None = None):
    """Gather exactly ``n_samples`` expert-labelled observations from crash-free rollouts.

    Rollouts that crash are discarded and re-run with fresh randomness.
    Returns ``(X, A, executed_by)``.
    """
    X, A, who = [], [], []
    got = 0
    attempts = 0
    crashed = 0
    while got < n_samples:
        T = min(cfg.rollout_steps, n_samples - got)
        tr = rollout(learner, expert, mix_prob, T, world, rng.spawn(1)[0], label=True)
        attempts += 1
        if tr.crashed_at is not None:
            crashed += 1
            log.info("collection rollout crashed at %d; discarded", tr.crashed_at)
            if crashed > cfg.max_attempts:
                raise CollectionError(f"{crashed} crashed collection rollouts for one quota")
            continue
        X.append(np.array([o.as_array() for o in tr.observations]))
        A.append(np.array([a.as_array() for a in tr.expert_actions]))
        who += tr.executed_by
        got += len(tr)
    if stats is not None:
        stats.update(attempts=attempts, crashed=crashed)
    return np.concatenate(X), np.concatenate(A), who


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate_policy(policy, world: World, n_rollouts: int = 3, T: int = 3000, expert=None,
                    rng: np.random.Generator | None = None) -> EvalMetrics:
    """Run the learner alone (or the expert, if ``policy`` is None) and score it.

    Losses are mean absolute differences to the expert's labels over the
    traveled steps of each rollout; every metric is then averaged over rollouts.
    """
    if expert is None:
        raise ValueError("evaluation needs the expert for loss labels")
    rng = rng or np.random.default_rng(0)
    mix = 1.0 if policy is None else 0.0
    rows = []
    for r in rng.spawn(n_rollouts):
        tr = rollout(policy, expert, mix, T, world, r, label=True)
        if len(tr) == 0:
            rows.append((0.0, 0.0, tr.completion_ratio, 0.0, 0.0))
            continue
        vx = np.array([s.vx for s in tr.states])
        exe = np.array([a.as_array() for a in tr.actions])
        lab = np.array([a.as_array() for a in tr.expert_actions])
        err = np.abs(exe - lab).mean(axis=0)
        rows.append((vx.mean(), vx.max(), tr.completion_ratio, err[0], err[1]))
    m = np.mean(np.array(rows), axis=0)
    return EvalMetrics(float(m[0]), float(m[1]), float(m[2]), float(m[3]), float(m[4]), n_rollouts)


# --------------------------------------------------------------------------
# Batch and online IL
# --------------------------------------------------------------------------

@dataclass
class ILResult:
    name: str
    params: PolicyParams
    metrics: EvalMetrics
    dataset_size: int
    expert_fraction: float = 1.0
    epoch_losses: list = field(default_factory=list)


def _train(dataset: ImitationDataset, cfg: TrainConfig, seed: int):
    return train(dataset, cfg.epochs, cfg.batch_size, cfg.lr, seed)


def run_batch_il(expert, world: World, n_samples: int, train_cfg: TrainConfig = TrainConfig(),
                 seed: int = 0, collect_cfg: CollectConfig = CollectConfig(), eval_rollouts: int = 3,
                 eval_T: int = 3000):
    """Collect ``n_samples`` by running the expert alone, train once, evaluate.

    Returns ``(ILResult, dataset)``. A crash of the expert itself aborts the
    run with the partial data attached to the error.
    """
    collect_rng, train_seed_rng, eval_rng = np.random.default_rng(seed).spawn(3)
    data = ImitationDataset()
    try:
        X, A, _ = collect_samples(expert, world, n_samples, 1.0, None, collect_rng,
                                  CollectConfig(collect_cfg.rollout_steps, 0))
    except CollectionError as exc:
        raise CollectionError(f"expert failed during batch collection: {exc}", data) from exc
    data.add(X, A, 0)
    res = _train(data, train_cfg, int(train_seed_rng.integers(2 ** 31)))
    metrics = evaluate_policy(MLPPolicy(res.params), world, eval_rollouts, eval_T, expert, eval_rng)
    return ILResult("batch", res.params, metrics, len(data), 1.0, res.epoch_losses), data


def run_dagger(expert, world: World, n_iters: int = 3, samples_per_iter: int = 1500,
               beta: float = 0.6, train_cfg: TrainConfig = TrainConfig(), seed: int = 0,
               collect_cfg: CollectConfig = CollectConfig(), eval_rollouts: int = 3,
               eval_T: int = 3000, initial_data=None, evaluate_initial: bool = True):
    """DAgger with mixing ``beta**i``; returns ``(results per iteration, dataset)``.

    Iteration 0 uses pure-expert data (``initial_data`` may supply it as an
    ``(X, A)`` pair). Each later iteration collects under the mixed policy,
    appends to the dataset and retrains from scratch on all of it.
    """
    rngs = np.random.default_rng(seed).spawn(3 * (n_iters + 1))
    data = ImitationDataset()
    results = []
    for i in range(n_iters + 1):
        collect_rng, train_seed_rng, eval_rng = rngs[3 * i:3 * i + 3]
        beta_i = mixing_probability(i, beta)
        if i == 0 and initial_data is not None:
            X, A = initial_data
            X, A = np.asarray(X)[:samples_per_iter], np.asarray(A)[:samples_per_iter]
            who = ["expert"] * len(X)
        else:
            learner = MLPPolicy(results[-1].params) if results else None
            X, A, who = collect_samples(expert, world, samples_per_iter, beta_i, learner,
                                        collect_rng, collect_cfg)
        if len(X) != samples_per_iter:
            raise ValueError("iteration quota not met")
        data.add(X, A, i)
        assert len(data) == (i + 1) * samples_per_iter
        res = _train(data, train_cfg, int(train_seed_rng.integers(2 ** 31)))
        frac = sum(w == "expert" for w in who) / len(who)
        if i > 0 or evaluate_initial:
            metrics = evaluate_policy(MLPPolicy(res.params), world, eval_rollouts, eval_T, expert,
                                      eval_rng)
        else:
            metrics = None
        results.append(ILResult(f"online_{i}", res.params, metrics, len(data), frac,
                                res.epoch_losses))
        log.info("dagger iteration %d: beta^i=%.3f expert fraction %.3f metrics %s", i, beta_i,
                 frac, metrics)
    return results, data


def best_iteration(results) -> int:
    scored = [(r.metrics.total_loss, k) for k, r in enumerate(results) if r.metrics is not None]
    return min(scored)[1]


def check_equal_data(*sizes) -> None:
    if len(set(sizes)) != 1:
        raise AssertionError(f"batch and online runs use different data sizes: {sizes}")


def write_metrics_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_manifest(path, config_hash: str, seeds: dict, results, extra: dict | None = None) -> None:
    payload = {
        "config_hash": config_hash,
        "seeds": seeds,
        "iterations": [{"name": r.name, "dataset_size": r.dataset_size,
                        "expert_fraction": r.expert_fraction,
                        "metrics": None if r.metrics is None else asdict(r.metrics)}
                       for r in results],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# Performance difference lemma on tabular MDPs
# --------------------------------------------------------------------------

@dataclass
class TabularMDP:
    """Finite-horizon MDP with stationary transitions ``P[s, a, s']`` and costs ``cost[s, a]``.

    ``pi`` and ``pi_prime`` are per-state action distributions ``(S, A)``;
    ``init`` is the initial state distribution.
    """

    P: np.ndarray
    cost: np.ndarray
    horizon: int
    pi: np.ndarray
    pi_prime: np.ndarray
    init: np.ndarray

    def __post_init__(self):
        S, A = self.cost.shape
        if self.P.shape != (S, A, S):
            raise ValueError("transition tensor shape mismatch")
        for name, M in (("P", self.P), ("pi", self.pi), ("pi_prime", self.pi_prime)):
            if np.any(M < 0) or not np.allclose(M.sum(axis=-1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must be probability distributions")
        if self.pi.shape != (S, A) or self.pi_prime.shape != (S, A):
            raise ValueError("policy shape mismatch")
        if self.init.shape != (S,) or not np.isclose(self.init.sum(), 1.0, atol=1e-12):
            raise ValueError("init must be a distribution over states")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("costs must be finite")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if S * A * self.horizon > 10 ** 5:
            raise ValueError("MDP too large for exact dynamic programming")

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int = 4, n_actions: int = 3,
               horizon: int = 5) -> "TabularMDP":
        def simplex(*shape):
            x = rng.random(shape)
            return x / x.sum(axis=-1, keepdims=True)
        return cls(simplex(n_states, n_actions, n_states), rng.normal(size=(n_states, n_actions)),
                   horizon, simplex(n_states, n_actions), simplex(n_states, n_actions),
                   simplex(n_states))


def state_distributions(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """``d[t, s]``: probability of being in ``s`` at time ``t`` under ``pi``."""
    d = np.empty((mdp.horizon, len(mdp.init)))
    d[0] = mdp.init
    P_pi = np.einsum("sa,sap->sp", pi, mdp.P)
    for t in range(1, mdp.horizon):
        d[t] = d[t - 1] @ P_pi
    return d


def policy_cost(mdp: TabularMDP, pi: np.ndarray) -> float:
    """``J(pi) = E sum_t c(s_t, a_t)`` by forward propagation of state distributions."""
    d = state_distributions(mdp, pi)
    return float(np.sum(d * np.sum(pi * mdp.cost, axis=1)))


def q_values(mdp: TabularMDP, pi: np.ndarray):
    """Backward DP: ``Q[t, s, a]`` and ``V[t, s]`` of following ``pi`` from time ``t``."""
    S, A = mdp.cost.shape
    Q = np.empty((mdp.horizon, S, A))
    V = np.zeros((mdp.horizon + 1, S))
    for t in range(mdp.horizon - 1, -1, -1):
        Q[t] = mdp.cost + mdp.P @ V[t + 1]
        V[t] = np.sum(pi * Q[t], axis=1)
    return Q, V[:-1]


def performance_difference_check(mdp: TabularMDP):
    """Both sides of ``J(pi) = J(pi') + T * E_{(s,t)~d_pi} E_{a~pi_s} A^t_{pi'}(s, a)``.

    With ``d_pi(s, t) = d^t_pi(s) / T`` the expectation over time is an
    average, hence the factor ``T`` in front.
    """
    T = mdp.horizon
    lhs = policy_cost(mdp, mdp.pi)
    Q, V = q_values(mdp, mdp.pi_prime)
    adv = Q - V[:, :, None]
    d_pi = state_distributions(mdp, mdp.pi) / T
    expected_adv = float(np.sum(d_pi[:, :, None] * mdp.pi[None] * adv))
    rhs = policy_cost(mdp, mdp.pi_prime) + T * expected_adv
    return lhs, rhs, abs(lhs - rhs)
