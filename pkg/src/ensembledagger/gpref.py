"""Exact Gaussian-process regression with a squared-exponential kernel.

Zero prior mean. Hyperparameters are fitted by maximizing the log marginal
likelihood with ADAM on log-parameters from several seeded starts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .nncore import adam_init, adam_step

__all__ = [
    "GpFitError",
    "GpParams",
    "GpModel",
    "se_kernel",
    "gp_condition",
    "log_marginal_likelihood",
    "gp_fit",
    "gp_posterior",
    "JITTER_SCHEDULE",
]

JITTER_SCHEDULE = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GpFitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpParams:
    length_scale: float = 10.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        if not (self.length_scale > 0 and self.signal_variance > 0 and self.noise_variance >= 0):
            raise ValueError(f"invalid GP hyperparameters {self}")


@dataclass
class GpModel:
    length_scale: float
    signal_variance: float
    noise_variance: float
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol_factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    log_marginal_likelihood: float = float("nan")

    @property
    def params(self):
        return GpParams(self.length_scale, self.signal_variance, self.noise_variance)


def se_kernel(A, B, length_scale, signal_variance):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return signal_variance * np.exp(-0.5 * np.maximum(d2, 0.0) / length_scale ** 2)


def _as_inputs(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _cholesky(K):
    n = len(K)
    for jitter in JITTER_SCHEDULE:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise GpFitError("kernel matrix is not positive definite even with jitter 1e-6")


def gp_condition(X, y, params):
    """Condition a GP with fixed hyperparameters on (X, y)."""
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    if len(X) < 1 or len(X) != len(y):
        raise ValueError("need at least one training point and matching targets")
    K = se_kernel(X, X, params.length_scale, params.signal_variance)
    K[np.diag_indices_from(K)] += params.noise_variance
    L, jitter = _cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = (-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi))
    return GpModel(params.length_scale, params.signal_variance, params.noise_variance,
                   X, y, L, alpha, jitter, float(lml))


def log_marginal_likelihood(X, y, log_params, optimize_length_scale=True, fixed_length_scale=None):
    """Log marginal likelihood and its gradient in log-parameter space.

    ``log_params`` is ``[log l, log sf2, log sn2]`` when the length-scale is
    free, otherwise ``[log sf2, log sn2]``.
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    lp = np.asarray(log_params, dtype=float)
    if optimize_length_scale:
        ell, sf2, sn2 = np.exp(lp)
    else:
        ell = fixed_length_scale
        sf2, sn2 = np.exp(lp)
    n = len(y)
    Kse = se_kernel(X, X, ell, sf2)
    K = Kse + sn2 * np.eye(n)
    L, _ = _cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    dK = [Kse, sn2 * np.eye(n)]
    if optimize_length_scale:
        dK.insert(0, Kse * d2 / ell ** 2)
    grad = np.array([0.5 * np.sum(W * D) for D in dK])
    return float(lml), grad


@dataclass(frozen=True)
class _Bounds:
    length_scale: tuple = (1e-2, 1e3)
    signal_variance: tuple = (1e-3, 1e4)
    noise_variance: tuple = (1e-8, 1e1)


def gp_fit(X, y, init_params=GpParams(), n_restarts=9, optimize_length_scale=False, seed=0,
           steps=200, learning_rate=0.05, bounds=_Bounds()):
    """Fit hyperparameters by maximizing the log marginal likelihood.

    ``n_restarts`` ADAM runs of ``steps`` steps each: the first starts from
    ``init_params``, the rest from log-uniform draws inside ``bounds``. The best
    run wins. ``n_restarts=0`` conditions on ``init_params`` unchanged. With
    ``optimize_length_scale=False`` the length-scale stays at its initial value.
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    if n_restarts <= 0:
        return gp_condition(X, y, init_params)

    names = (["length_scale"] if optimize_length_scale else []) + ["signal_variance", "noise_variance"]
    lo = np.log([getattr(bounds, n)[0] for n in names])
    hi = np.log([getattr(bounds, n)[1] for n in names])
    start = np.log([max(getattr(init_params, n), getattr(bounds, n)[0]) for n in names])
    rng = np.random.default_rng(seed)
    fixed_ell = None if optimize_length_scale else init_params.length_scale

    best_theta, best_lml = None, -np.inf
    for r in range(n_restarts):
        theta = np.clip(start if r == 0 else rng.uniform(lo, hi), lo, hi)
        state = adam_init([theta], learning_rate=learning_rate)
        cur_best_theta, cur_best = theta, -np.inf
        for _ in range(steps):
            try:
                lml, g = log_marginal_likelihood(X, y, theta, optimize_length_scale, fixed_ell)
            except GpFitError:
                break
            if lml > cur_best:
                cur_best, cur_best_theta = lml, theta
            (theta,), state = adam_step([theta], [-g], state)
            theta = np.clip(theta, lo, hi)
        try:
            lml, _ = log_marginal_likelihood(X, y, theta, optimize_length_scale, fixed_ell)
            if lml > cur_best:
                cur_best, cur_best_theta = lml, theta
        except GpFitError:
            pass
        if cur_best > best_lml:
            best_lml, best_theta = cur_best, cur_best_theta
    if best_theta is None:
        raise GpFitError("every restart failed")
    vals = dict(zip(names, np.exp(best_theta)))
    params = GpParams(vals.get("length_scale", init_params.length_scale),
                      vals["signal_variance"], vals["noise_variance"])
    return gp_condition(X, y, params)


def gp_posterior(model, query):
    """Posterior mean and standard deviation of the latent function.

    ``query`` is one point ``(d,)`` (scalars for 1-D inputs) or a batch
    ``(m, d)``; the output matches.
    """
    q = np.asarray(query, dtype=float)
    d = model.train_inputs.shape[1]
    single = q.ndim == 0 or (q.ndim == 1 and d > 1 and q.shape[0] == d)
    Q = q.reshape(-1, d)
    Ks = se_kernel(Q, model.train_inputs, model.length_scale, model.signal_variance)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol_factor, Ks.T, lower=True)
    var = model.signal_variance - np.sum(v * v, axis=0)
    std = np.sqrt(np.maximum(var, 0.0))
    if single:
        return float(mean[0]), float(std[0])
    return mean, std
