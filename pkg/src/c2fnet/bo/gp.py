"""Gaussian-process regression with a squared-exponential radial kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTERS = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)
LENGTH_GRID = (0.1, 0.2, 0.4)


class GPFitError(RuntimeError):
    pass


def se_kernel(a, b, lengthscale, signal_var):
    """``signal_var * exp(-|a - b|^2 / (2 l^2))`` with per-dimension ``l``."""
    a = np.atleast_2d(a) / lengthscale
    b = np.atleast_2d(b) / lengthscale
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass
class GPModel:
    X: np.ndarray
    y: np.ndarray
    lengthscale: np.ndarray
    signal_var: float
    noise_var: float
    prior_mean: float
    chol: np.ndarray
    weights: np.ndarray  # (K + noise I)^-1 (y - prior_mean)
    jitter: float = 0.0

    def posterior(self, g):
        """Posterior mean and standard deviation at one point or an ``(m, d)`` batch."""
        g = np.asarray(g, dtype=np.float64)
        single = g.ndim <= 1
        g = g.reshape(-1, self.X.shape[1])
        ks = se_kernel(g, self.X, self.lengthscale, self.signal_var)
        mean = self.prior_mean + ks @ self.weights
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = np.maximum(self.signal_var - (v * v).sum(0), 0.0)
        std = np.sqrt(var)
        return (float(mean[0]), float(std[0])) if single else (mean, std)

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.prior_mean
        n = len(r)
        return float(-0.5 * r @ self.weights - np.log(np.diag(self.chol)).sum()
                     - 0.5 * n * np.log(2 * np.pi))


def gp_fit(X, y, lengthscale=0.2, signal_var=None, noise_var=1e-6, prior_mean=None,
           refine=False) -> GPModel:
    """Condition a GP on observations.

    ``signal_var`` defaults to the sample variance of ``y`` (1.0 when the
    observations are constant) and ``prior_mean`` to their mean.  With
    ``refine`` the length scale is picked from a small grid by marginal
    likelihood.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(X) != len(y) or len(y) == 0:
        raise ValueError("need at least one observation and matching X / y")
    if signal_var is None:
        signal_var = float(np.var(y))
        if signal_var < 1e-12:
            signal_var = 1.0
    if prior_mean is None:
        prior_mean = float(np.mean(y))
    if refine:
        fits = [gp_fit(X, y, ls, signal_var, noise_var, prior_mean) for ls in LENGTH_GRID]
        return max(fits, key=lambda m: m.log_marginal_likelihood())
    ls = np.broadcast_to(np.asarray(lengthscale, dtype=np.float64), (X.shape[1],)).copy()
    K = se_kernel(X, X, ls, signal_var)
    n = len(y)
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + (noise_var + jitter) * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        w = cho_solve((L, True), y - prior_mean)
        return GPModel(X, y, ls, float(signal_var), float(noise_var), float(prior_mean), L, w, jitter)
    raise GPFitError(f"kernel matrix not positive definite even with jitter {JITTERS[-1]:g} "
                     f"({n} points, noise {noise_var:g}); duplicate inputs with conflicting outputs?")


def gp_posterior(model: GPModel, g):
    return model.posterior(g)
