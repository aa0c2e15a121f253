"""Sparse Spectrum Gaussian Process regression and Gaussian belief propagation.

A model is Bayesian linear regression on trigonometric features
``phi(x) = sigma_k [cos(W x); sin(W x)]`` with frequencies drawn from the
spectral density of an RBF kernel. Multiple outputs share the features and the
precision ``A = Phi Phi^T + sigma_n^2 I``; only the targets differ. ``A`` is
kept as its lower Cholesky factor and never inverted explicitly.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SSGPHyper:
    """Hyperparameters: ``m`` frequencies, signal scale, noise std and RBF lengthscales.

    ``periodic_dims`` lists inputs that are angles; their frequencies are
    rounded to integers so the features are exactly 2*pi-periodic there.
    An infinite lengthscale removes an input from the features.
    """

    m: int
    sigma_k: float
    sigma_n: float
    lengthscales: tuple
    periodic_dims: tuple = ()

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.sigma_k <= 0 or self.sigma_n <= 0:
            raise ValueError("sigma_k and sigma_n must be positive")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if any(not v > 0 for v in ls):
            raise ValueError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "periodic_dims", tuple(int(d) for d in self.periodic_dims))

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)


def sample_frequencies(hyper: SSGPHyper, freq_seed: int) -> np.ndarray:
    """Draw the ``m x d`` frequency matrix from the RBF spectral density."""
    base = np.random.default_rng(freq_seed).standard_normal((hyper.m, hyper.input_dim))
    freqs = base / np.asarray(hyper.lengthscales)
    for d in hyper.periodic_dims:
        freqs[:, d] = np.round(freqs[:, d])
    return freqs


def _features(X: np.ndarray, freqs: np.ndarray, sigma_k: float) -> np.ndarray:
    """Row-wise feature matrix, shape (n, 2m)."""
    proj = X @ freqs.T
    return sigma_k * np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


@dataclass(frozen=True)
class SSGPModel:
    hyper: SSGPHyper
    freqs: np.ndarray
    chol: np.ndarray  # lower factor L, A = L L^T
    phi_y: np.ndarray  # Phi Y, shape (2m, n_out)
    weight_mean: np.ndarray  # alpha, shape (2m, n_out)
    n_data: int = 0
    y_sq: np.ndarray = field(default=None)  # per-output sum of squared targets
    freq_seed: int | None = None

    @property
    def n_features(self) -> int:
        return 2 * self.hyper.m

    @property
    def n_outputs(self) -> int:
        return self.weight_mean.shape[1]

    @property
    def precision(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def features(self, X) -> np.ndarray:
        return _features(np.atleast_2d(np.asarray(X, dtype=float)), self.freqs, self.hyper.sigma_k)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "hyper": {"m": h.m, "sigma_k": h.sigma_k, "sigma_n": h.sigma_n,
                      "lengthscales": list(h.lengthscales), "periodic_dims": list(h.periodic_dims)},
            "freq_seed": self.freq_seed,
            "freqs": self.freqs.tolist(),
            "chol": self.chol.tolist(),
            "phi_y": self.phi_y.tolist(),
            "weight_mean": self.weight_mean.tolist(),
            "n_data": self.n_data,
            "y_sq": self.y_sq.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SSGPModel":
        h = d["hyper"]
        hyper = SSGPHyper(h["m"], h["sigma_k"], h["sigma_n"], tuple(h["lengthscales"]),
                          tuple(h.get("periodic_dims", ())))
        return cls(hyper, np.array(d["freqs"], dtype=float), np.array(d["chol"], dtype=float),
                   np.array(d["phi_y"], dtype=float), np.array(d["weight_mean"], dtype=float),
                   int(d["n_data"]), np.array(d["y_sq"], dtype=float), d.get("freq_seed"))


def feature_map(x, model: SSGPModel) -> np.ndarray:
    """``[sigma_k cos(W x); sigma_k sin(W x)]`` for a single input."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.freqs.shape[1],):
        raise ValueError(f"input has shape {x.shape}, model expects ({model.freqs.shape[1]},)")
    return model.features(x)[0]


def _as_targets(Y, n: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise ValueError(f"{n} inputs but {Y.shape[0]} target rows")
    return Y


def fit_posterior(X, Y, hyper: SSGPHyper, freq_seed: int = 0, freqs: np.ndarray | None = None,
                  n_outputs: int | None = None) -> SSGPModel:
    """Weight posterior ``N(alpha, sigma_n^2 A^-1)`` given data ``(X, Y)``.

    With no rows this is the prior: ``alpha = 0`` and ``A = sigma_n^2 I``.
    """
    X = np.asarray(X, dtype=float).reshape(-1, hyper.input_dim)
    n = X.shape[0]
    if n == 0 and (Y is None or np.size(Y) == 0):
        Y = np.zeros((0, n_outputs or 1))
    Y = _as_targets(Y, n)
    if freqs is None:
        freqs = sample_frequencies(hyper, freq_seed)
    Phi = _features(X, freqs, hyper.sigma_k)  # (n, 2m)
    A = Phi.T @ Phi + hyper.sigma_n ** 2 * np.eye(2 * hyper.m)
    L = cholesky(A, lower=True)
    phi_y = Phi.T @ Y
    alpha = cho_solve((L, True), phi_y)
    # C order throughout so a model and its deserialized copy predict bit-identically
    c = np.ascontiguousarray
    return SSGPModel(hyper, c(freqs), c(L), c(phi_y), c(alpha), n, np.sum(Y ** 2, axis=0), freq_seed)


def prior_model(hyper: SSGPHyper, n_outputs: int = 1, freq_seed: int = 0) -> SSGPModel:
    return fit_posterior(np.zeros((0, hyper.input_dim)), None, hyper, freq_seed, n_outputs=n_outputs)


def cholesky_rank1_update(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Lower factor of ``L L^T + v v^T`` in O(n^2)."""
    L = L.copy()
    v = np.array(v, dtype=float)
    n = len(v)
    for k in range(n):
        lkk = L[k, k]
        r = math.hypot(lkk, v[k])
        c, s = r / lkk, v[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            L[k + 1:, k] = (L[k + 1:, k] + s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * L[k + 1:, k]
    return L


def incremental_update(model: SSGPModel, x, y) -> SSGPModel:
    """Condition on one more observation with a rank-1 factor update."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.freqs.shape[1],):
        raise ValueError(f"input has shape {x.shape}, model expects ({model.freqs.shape[1]},)")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.n_outputs,):
        raise ValueError(f"target has shape {y.shape}, model has {model.n_outputs} outputs")
    phi = feature_map(x, model)
    L = cholesky_rank1_update(model.chol, phi)
    phi_y = model.phi_y + np.outer(phi, y)
    alpha = np.ascontiguousarray(cho_solve((L, True), phi_y))
    return replace(model, chol=L, phi_y=phi_y, weight_mean=alpha, n_data=model.n_data + 1,
                   y_sq=model.y_sq + y ** 2)


def predict(model: SSGPModel, x):
    """Predictive mean and variance; a single input gives 1-D arrays over outputs."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Phi = model.features(x)
    mean = Phi @ model.weight_mean
    v = solve_triangular(model.chol, Phi.T, lower=True)
    var = model.hyper.sigma_n ** 2 * (1.0 + np.sum(v ** 2, axis=0))
    var = np.repeat(var[:, None], model.n_outputs, axis=1)
    if single:
        return mean[0], var[0]
    return mean, var


def predict_with_jacobian(model: SSGPModel, Z: np.ndarray):
    """Mean ``(n, o)``, variance ``(n, o)`` and mean Jacobian ``(n, o, d)`` at rows of ``Z``."""
    Z = np.atleast_2d(Z)
    proj = Z @ model.freqs.T
    c, s = np.cos(proj), np.sin(proj)
    sk = model.hyper.sigma_k
    Phi = sk * np.concatenate([c, s], axis=1)
    m = model.hyper.m
    a_c, a_s = model.weight_mean[:m], model.weight_mean[m:]
    mean = Phi @ model.weight_mean
    # d mean_j / dz = sum_i (-a_c[i,j] sin_i + a_s[i,j] cos_i) sk w_i
    jac = np.einsum("ni,ij,id->njd", -s * sk, a_c, model.freqs) + \
        np.einsum("ni,ij,id->njd", c * sk, a_s, model.freqs)
    v = solve_triangular(model.chol, Phi.T, lower=True)
    var = model.hyper.sigma_n ** 2 * (1.0 + np.sum(v ** 2, axis=0))
    return mean, np.repeat(var[:, None], model.n_outputs, axis=1), jac


def predict_derivatives(model: SSGPModel, Z: np.ndarray):
    """Mean, variance and their input derivatives at rows of ``Z``.

    Returns ``(mean (n,o), var (n,), jac (n,o,d), hess (n,o,d,d), var_grad (n,d))``;
    the variance is shared by all outputs of one model.
    """
    Z = np.atleast_2d(Z)
    W = model.freqs
    proj = Z @ W.T
    sk = model.hyper.sigma_k
    c, s = sk * np.cos(proj), sk * np.sin(proj)
    m = model.hyper.m
    a_c, a_s = model.weight_mean[:m], model.weight_mean[m:]
    Phi = np.concatenate([c, s], axis=1)
    mean = Phi @ model.weight_mean
    jac = np.einsum("ni,ij,id->njd", c, a_s, W) - np.einsum("ni,ij,id->njd", s, a_c, W)
    curv = -(c[:, :, None] * a_c[None] + s[:, :, None] * a_s[None])  # (n, m, o)
    hess = np.einsum("nio,id,ie->node", curv, W, W)
    sn2 = model.hyper.sigma_n ** 2
    q = cho_solve((model.chol, True), Phi.T).T  # A^-1 phi, row-wise
    var = sn2 * (1.0 + np.sum(Phi * q, axis=1))
    var_grad = 2.0 * sn2 * ((c * q[:, m:] - s * q[:, :m]) @ W)
    return mean, var, jac, hess, var_grad


# --------------------------------------------------------------------------
# Evidence and hyperparameter search
# --------------------------------------------------------------------------

def model_log_evidence(model: SSGPModel) -> float:
    """Log marginal likelihood of the stored data, summed over outputs."""
    n = model.n_data
    if n == 0:
        return 0.0
    sn2 = model.hyper.sigma_n ** 2
    two_m = model.n_features
    logdet = (n - two_m) * math.log(sn2) + 2.0 * np.sum(np.log(np.diag(model.chol)))
    w = solve_triangular(model.chol, model.phi_y, lower=True)
    quad = (model.y_sq - np.sum(w ** 2, axis=0)) / sn2
    return float(np.sum(-0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI))


def log_marginal_likelihood(X, Y, hyper: SSGPHyper, freq_seed: int = 0) -> float:
    X = np.asarray(X, dtype=float).reshape(-1, hyper.input_dim)
    if X.shape[0] == 0:
        return 0.0
    return model_log_evidence(fit_posterior(X, Y, hyper, freq_seed))


def hyper_grid(m: int, sigma_k_values, sigma_n_values, lengthscale_values,
               periodic_dims=()) -> list:
    """Cartesian grid; each lengthscale value is a full per-dimension tuple."""
    return [SSGPHyper(m, sk, sn, tuple(ls), periodic_dims)
            for sk, sn, ls in itertools.product(sigma_k_values, sigma_n_values, lengthscale_values)]


def grid_search(X, Y, grid, freq_seed: int = 0) -> SSGPHyper:
    """Grid point of maximal evidence; ties go to the smaller sigma_n, then the earlier index."""
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("grid search needs data")
    best = None
    for i, hyper in enumerate(grid):
        score = log_marginal_likelihood(X, Y, hyper, freq_seed)
        key = (-score, hyper.sigma_n, i)
        if best is None or key < best[0]:
            best = (key, hyper)
    return best[1]


def coordinate_search(X, Y, m: int, base_lengthscales, sigma_k_values, sigma_n_values,
                      multipliers, periodic_dims=(), freq_seed: int = 0, sweeps: int = 2,
                      start_multiplier: float = 2.0, fixed_dims=()) -> SSGPHyper:
    """Evidence ascent over a per-dimension lengthscale grid.

    Alternates an exhaustive ``(sigma_k, sigma_n)`` grid pass with one
    coordinate pass per input over ``multipliers`` (which may include
    ``inf`` to switch an input off). Inputs in ``fixed_dims`` keep their base
    lengthscale. Only strict improvements are taken, so ties keep the
    earlier candidate.
    """
    base = np.asarray(base_lengthscales, dtype=float)
    mult = np.where(np.isfinite(base), start_multiplier, 1.0)
    mult[list(fixed_dims)] = 1.0

    def score(mu, sk, sn):
        h = SSGPHyper(m, sk, sn, tuple(base * mu), periodic_dims)
        return log_marginal_likelihood(X, Y, h, freq_seed), h

    sk, sn = sigma_k_values[0], sigma_n_values[0]
    best, best_h = score(mult, sk, sn)
    for _ in range(sweeps):
        for cand_sk, cand_sn in itertools.product(sigma_k_values, sigma_n_values):
            val, h = score(mult, cand_sk, cand_sn)
            if val > best:
                best, best_h, sk, sn = val, h, cand_sk, cand_sn
        for d in range(len(base)):
            if d in fixed_dims or not np.isfinite(base[d]):
                continue
            for k in multipliers:
                trial = mult.copy()
                trial[d] = k
                val, h = score(trial, sk, sn)
                if val > best:
                    best, best_h, mult = val, h, trial
    return best_h


# --------------------------------------------------------------------------
# Beliefs and moment propagation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Belief:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("covariance shape does not match mean")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def vector(self) -> np.ndarray:
        """Stacked ``[mu; vec(Sigma)]`` (row-major vec)."""
        return np.concatenate([self.mu, self.sigma.ravel()])

    @classmethod
    def from_vector(cls, b, dim: int) -> "Belief":
        b = np.asarray(b, dtype=float)
        return cls(b[:dim], b[dim:].reshape(dim, dim))


def _check_psd(sigma: np.ndarray, tol: float = 1e-9) -> None:
    from .cost import check_covariance
    check_covariance(sigma, tol)


class DynamicsModel:
    """Learned delta dynamics ``x' - x = f(x, u)`` built from one or more SSGP models.

    The outputs of ``models`` are concatenated in order and must cover every
    state dimension. Model inputs are the state followed by the action.
    """

    def __init__(self, models, state_dim: int, action_dim: int):
        self.models = list(models)
        self.state_dim = state_dim
        self.action_dim = action_dim
        if sum(m.n_outputs for m in self.models) != state_dim:
            raise ValueError("model outputs do not cover the state")
        for m in self.models:
            if m.freqs.shape[1] != state_dim + action_dim:
                raise ValueError("model input dimension must be state_dim + action_dim")

    def predict(self, Z: np.ndarray):
        """Stacked mean, variance and input Jacobian over all outputs, batched over rows."""
        means, vars_, jacs = zip(*(predict_with_jacobian(m, Z) for m in self.models))
        return np.concatenate(means, 1), np.concatenate(vars_, 1), np.concatenate(jacs, 1)

    def to_dict(self) -> dict:
        return {"state_dim": self.state_dim, "action_dim": self.action_dim,
                "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsModel":
        return cls([SSGPModel.from_dict(m) for m in d["models"]], d["state_dim"], d["action_dim"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DynamicsModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def as_dynamics(models, action_dim: int | None = None) -> DynamicsModel:
    if isinstance(models, DynamicsModel):
        return models
    if isinstance(models, SSGPModel):
        models = [models]
    models = list(models)
    state_dim = sum(m.n_outputs for m in models)
    if action_dim is None:
        action_dim = models[0].freqs.shape[1] - state_dim
    return DynamicsModel(models, state_dim, action_dim)


def propagate_moments(dyn: DynamicsModel, MU: np.ndarray, SIG: np.ndarray, U: np.ndarray):
    """Batched belief update; returns ``(MU', SIG', extras)``.

    ``extras`` holds the mean Jacobians w.r.t. state and action and the
    predictive variances, so linearization code can reuse them.
    """
    n = MU.shape[0]
    Z = np.concatenate([MU, U.reshape(n, -1)], axis=1)
    g, var, jac = dyn.predict(Z)
    ds = dyn.state_dim
    J = jac[:, :, :ds]
    M = np.eye(ds) + J
    sig_new = M @ SIG @ np.swapaxes(M, 1, 2)
    sig_new[:, np.arange(ds), np.arange(ds)] += var
    sig_new = 0.5 * (sig_new + np.swapaxes(sig_new, 1, 2))
    return MU + g, sig_new, {"J": J, "Ju": jac[:, :, ds:], "var": var, "M": M}


def propagate_belief(models, b: Belief, a, check: bool = True) -> Belief:
    """One-step Gaussian belief update through the learned dynamics.

    The predictive mean is linearized at ``z = (mu, a)``. With ``J`` its
    state Jacobian, ``Sigma' = Sigma + J Sigma J^T + Sigma J^T + J Sigma +
    diag(var(z))``, symmetrized, and eigenvalues below zero clamped away.
    """
    dyn = as_dynamics(models)
    if check:
        _check_psd(b.sigma)
    a = a.as_array() if hasattr(a, "as_array") else np.asarray(a, dtype=float)
    mu, sig, _ = propagate_moments(dyn, b.mu[None], b.sigma[None], a[None])
    sig = sig[0]
    w, V = np.linalg.eigh(sig)
    if w.min() < 0.0:
        sig = (V * np.maximum(w, 0.0)) @ V.T
        sig = 0.5 * (sig + sig.T)
    return Belief(mu[0], sig)
