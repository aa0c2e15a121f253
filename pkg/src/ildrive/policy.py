"""The learner: a small MLP from observations to actions, trained with the l1 imitation loss."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .sim.sensors import Observation
from .sim.vehicle import Action

log = logging.getLogger(__name__)

DEFAULT_SIZES = (20, 64, 32, 2)
DEFAULT_DROPOUT = (0.5, 0.25)


@dataclass(frozen=True)
class PolicyParams:
    """Layer weights ``W[l]`` (in x out) and biases, plus frozen input normalization.

    Hidden layers use ReLU, the output layer tanh. ``dropout[0]`` applies to
    the first hidden layer's output and ``dropout[1]`` to every later hidden
    layer.
    """

    weights: tuple
    biases: tuple
    norm_mean: np.ndarray
    norm_std: np.ndarray
    dropout: tuple = DEFAULT_DROPOUT
    seed: int | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias per layer")
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise ValueError("bias size does not match layer width")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "PolicyParams":
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def dropout_rate(self, layer: int) -> float:
        """Rate applied to the output of hidden layer ``layer`` (0-based)."""
        if not self.dropout:
            return 0.0
        return self.dropout[0] if layer == 0 else self.dropout[min(1, len(self.dropout) - 1)]

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {"architecture": {"sizes": list(self.sizes), "hidden": "relu", "output": "tanh"},
                "dropout": list(self.dropout), "seed": self.seed,
                "norm_mean": self.norm_mean.tolist(), "norm_std": self.norm_std.tolist(),
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(tuple(np.array(W, dtype=float) for W in d["weights"]),
                   tuple(np.array(b, dtype=float) for b in d["biases"]),
                   np.array(d["norm_mean"], dtype=float), np.array(d["norm_std"], dtype=float),
                   tuple(d["dropout"]), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(rng: np.random.Generator, sizes=DEFAULT_SIZES, norm_mean=None, norm_std=None,
                dropout=DEFAULT_DROPOUT, seed: int | None = None) -> PolicyParams:
    """He-normal weights, zero biases."""
    Ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in))
        bs.append(np.zeros(n_out))
    mean = np.zeros(sizes[0]) if norm_mean is None else np.asarray(norm_mean, dtype=float)
    std = np.ones(sizes[0]) if norm_std is None else np.asarray(norm_std, dtype=float)
    return PolicyParams(tuple(Ws), tuple(bs), mean, std, tuple(dropout), seed)


def zero_params(sizes=DEFAULT_SIZES) -> PolicyParams:
    return PolicyParams(tuple(np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])),
                        tuple(np.zeros(b) for b in sizes[1:]), np.zeros(sizes[0]),
                        np.ones(sizes[0]), DEFAULT_DROPOUT)


def _as_input(obs) -> np.ndarray:
    x = obs.as_array() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)
    if np.any(np.isnan(x)):
        raise ValueError("observation contains NaN")
    return x


def forward_batch(params: PolicyParams, X: np.ndarray, train_mode: bool = False,
                  rng: np.random.Generator | None = None, cache: list | None = None) -> np.ndarray:
    """Outputs for rows of ``X`` (raw observations). Appends per-layer values to ``cache``."""
    if train_mode and rng is None:
        raise ValueError("train mode needs an rng for dropout masks")
    h = (np.atleast_2d(X) - params.norm_mean) / params.norm_std
    n_layers = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ W + b
        if l == n_layers - 1:
            out = np.tanh(pre)
            if cache is not None:
                cache.append((h, None, None))
            return out
        act = np.maximum(pre, 0.0)
        mask = None
        p = params.dropout_rate(l)
        if train_mode and p > 0.0:
            mask = (rng.random(act.shape) >= p) / (1.0 - p)
            act = act * mask
        if cache is not None:
            cache.append((h, pre, mask))
        h = act
    raise ValueError("policy has no layers")


def forward(params: PolicyParams, obs, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> Action:
    y = forward_batch(params, _as_input(obs)[None], train_mode, rng)[0]
    return Action(float(y[0]), float(y[1]))


def l1_loss_and_grad(params: PolicyParams, X, A, rng: np.random.Generator | None = None,
                     train_mode: bool | None = None):
    """Mean per-sample ``||pi(o) - a*||_1`` and its gradient (list matching ``params.arrays()``).

    Dropout is active when ``rng`` is given (unless ``train_mode=False``).
    The subgradient of ``|.|`` at zero is taken as zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if train_mode is None:
        train_mode = rng is not None
    cache: list = []
    Y = forward_batch(params, X, train_mode, rng, cache)
    diff = Y - A
    loss = float(np.sum(np.abs(diff)) / n)
    g = np.sign(diff) / n * (1.0 - Y ** 2)  # through tanh
    grads = [None] * (2 * len(params.weights))
    for l in range(len(params.weights) - 1, -1, -1):
        h_in = cache[l][0]
        grads[2 * l] = h_in.T @ g
        grads[2 * l + 1] = g.sum(axis=0)
        if l == 0:
            break
        g = g @ params.weights[l].T
        _, pre, mask = cache[l - 1]
        if mask is not None:
            g = g * mask
        g = g * (pre > 0.0)
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    arrays = params.arrays() if isinstance(params, PolicyParams) else params
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                     0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected ADAM; accepts :class:`PolicyParams` or a list of arrays."""
    arrays = params.arrays() if isinstance(params, PolicyParams) else list(params)
    if len(arrays) != len(grads) or len(state.m) != len(arrays):
        raise ValueError("parameter, gradient and moment lists differ in length")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = replace(state, m=new_m, v=new_v, t=t)
    out = params.with_arrays(new_p) if isinstance(params, PolicyParams) else new_p
    return out, new_state


@dataclass
class TrainResult:
    params: PolicyParams
    epoch_losses: list = field(default_factory=list)

    def write_log(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("epoch,mean_loss\n")
            for k, v in enumerate(self.epoch_losses):
                fh.write(f"{k},{v!r}\n")


def normalization_stats(X: np.ndarray):
    X = np.atleast_2d(X)
    std = X.std(axis=0)
    return X.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def train(dataset, epochs: int = 20, batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
          sizes=DEFAULT_SIZES, dropout=DEFAULT_DROPOUT) -> TrainResult:
    """Mini-batch ADAM on the l1 loss from a fresh initialization.

    ``dataset`` is an ``ImitationDataset`` (or anything with ``arrays()``
    and ``normalization_stats``) or an ``(X, A)`` pair. The epoch log holds
    the mean training-mode minibatch loss.
    """
    X, A = dataset if isinstance(dataset, tuple) else dataset.arrays()
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    stats = None if isinstance(dataset, tuple) else dataset.normalization_stats
    stats = stats or normalization_stats(X)
    init_rng, shuffle_rng, dropout_rng = np.random.default_rng(seed).spawn(3)
    params = init_params(init_rng, sizes, stats[0], stats[1], dropout, seed)
    opt = adam_init(params, lr)
    losses = []
    n = len(X)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = l1_loss_and_grad(params, X[idx], A[idx], dropout_rng)
            params, opt = adam_step(opt, params, grads)
            total += loss * len(idx)
        losses.append(total / n)
        log.info("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(params, losses)


class MLPPolicy:
    """Deterministic inference wrapper usable as a rollout policy."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, obs) -> Action:
        return forward(self.params, obs)
