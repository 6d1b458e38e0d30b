"""Bayesian optimization of the per-level exit thresholds (GP-UCB + DIRECT)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..cascade import EvalTable, evaluate_objective
from ..cost import CostProfile
from .direct import direct_maximize
from .gp import GPModel, gp_fit

log = logging.getLogger(__name__)


@dataclass
class AcquisitionConfig:
    ucb_beta: float = 4.0
    schedule: str = "fixed"  # or "log_growth"

    def __post_init__(self):
        if self.ucb_beta < 0:
            raise ValueError("ucb_beta must be >= 0")
        if self.schedule not in ("fixed", "log_growth"):
            raise ValueError(f"unknown UCB schedule {self.schedule!r}")

    def beta(self, t: int) -> float:
        if self.schedule == "fixed":
            return self.ucb_beta
        return 2.0 * math.log((t + 1) ** 2 * math.pi ** 2 / 6.0)


@dataclass
class BOBudget:
    init_random_evals: int = 5
    max_iterations: int = 100  # total objective evaluations, initial design included
    window: int = 15
    tolerance: float = 1e-4
    lengthscale: float = 0.2
    noise_var: float = 1e-6
    refine_lengthscale: bool = True
    direct_budget: int = 300
    warp: bool = False

    def __post_init__(self):
        if self.init_random_evals < 1:
            raise ValueError("init_random_evals must be >= 1")
        if self.max_iterations < self.init_random_evals:
            raise ValueError("max_iterations must be >= init_random_evals")


def ucb_score(model: GPModel, g, cfg: AcquisitionConfig, t: int = 0):
    mean, std = model.posterior(g)
    return mean + math.sqrt(cfg.beta(t)) * std


class QuantileWarp:
    """Monotone map from search coordinates ``u`` in [0, 1] to thresholds.

    Knots are the sorted observed confidences of a level padded with 0 and 1,
    spaced evenly in ``u``; moving ``u`` by ``1/(N+1)`` moves roughly one
    example across the exit boundary.  Every threshold in [0, 1] is reached.
    """

    def __init__(self, confidences):
        v = np.concatenate([[0.0], np.sort(np.asarray(confidences, dtype=np.float64)), [1.0]])
        self.values = np.clip(v, 0.0, 1.0)
        self.knots = np.linspace(0.0, 1.0, len(v))

    def __call__(self, u):
        return np.interp(u, self.knots, self.values)

    def inverse(self, g):
        # right-most u whose threshold does not exceed g
        k = np.searchsorted(self.values, g, side="right") - 1
        k = int(np.clip(k, 0, len(self.values) - 2))
        lo, hi = self.values[k], self.values[k + 1]
        frac = 0.0 if hi <= lo else (g - lo) / (hi - lo)
        return float(self.knots[k] + frac * (self.knots[k + 1] - self.knots[k]))


def latin_hypercube(n, d, rng):
    """One point per stratum along every axis, strata paired by random permutations."""
    strata = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    return (strata + rng.random((n, d))) / n


@dataclass
class HistoryRow:
    iteration: int
    gamma: np.ndarray
    objective: float
    error_norm: float
    energy_norm: float
    exit_histogram: np.ndarray
    source: str  # "init", "warm", "bo"


@dataclass
class TuneResult:
    gamma: np.ndarray
    objective: float
    history: list = field(default_factory=list)
    shared: bool = False


def optimize_thresholds(table: EvalTable, lam: float, cost: CostProfile | None = None,
                        budget: BOBudget | None = None, acq: AcquisitionConfig | None = None,
                        seed: int = 0, shared: bool = False, warm_start=None) -> TuneResult:
    """Minimize the error/energy objective over the threshold box with GP-UCB.

    ``shared`` searches a single threshold applied at every level.
    ``warm_start`` points (in the search space) are evaluated right after the
    random initial design.  The returned thresholds are the best evaluated
    point, never a model prediction.
    """
    budget = budget or BOBudget()
    acq = acq or AcquisitionConfig()
    if cost is not None:
        table = EvalTable(table.predicted, table.confidence, table.true_label, cost.costs, table.kind)
    T = table.T
    expand = (lambda g: np.repeat(g[:1], T - 1)) if shared else (lambda g: g)
    if T == 1:
        r = evaluate_objective(table, [], lam)
        row = HistoryRow(0, np.empty(0), r.objective, r.error_norm, r.energy_norm, r.exit_histogram, "init")
        return TuneResult(np.empty(0), r.objective, [row], shared)
    d = 1 if shared else T - 1
    rng = np.random.default_rng(seed)
    history: list[HistoryRow] = []
    if budget.warp:
        conf = table.confidence[:, :-1]
        warps = [QuantileWarp(conf.ravel())] if shared else [QuantileWarp(conf[:, i]) for i in range(d)]
        to_gamma = lambda u: np.array([w(ui) for w, ui in zip(warps, u)])
        to_u = lambda g: np.array([w.inverse(gi) for w, gi in zip(warps, g)])
    else:
        to_gamma = to_u = lambda u: np.asarray(u, dtype=np.float64)

    def query(g, source):
        g = np.clip(np.asarray(g, dtype=np.float64).reshape(d), 0.0, 1.0)
        r = evaluate_objective(table, expand(g), lam)
        history.append(HistoryRow(len(history), expand(g), r.objective, r.error_norm,
                                  r.energy_norm, r.exit_histogram, source))
        return r.objective

    X, Y = [], []
    for u in latin_hypercube(budget.init_random_evals, d, rng):
        X.append(u)
        Y.append(query(to_gamma(u), "init"))
    for g in ([] if warm_start is None else warm_start):
        if len(Y) >= budget.max_iterations:
            break
        g = np.asarray(g, dtype=np.float64).reshape(-1)[:d]
        X.append(to_u(g))
        Y.append(query(g, "warm"))

    best_trace = [min(Y)]
    t = 0
    while len(Y) < budget.max_iterations:
        # maximize the negated objective
        model = gp_fit(np.array(X), -np.array(Y), budget.lengthscale, noise_var=budget.noise_var,
                       refine=budget.refine_lengthscale)
        res = direct_maximize(lambda g: ucb_score(model, g, acq, t), d, budget.direct_budget)
        X.append(res.x)
        Y.append(query(to_gamma(res.x), "bo"))
        t += 1
        best_trace.append(min(Y))
        w = budget.window
        if len(best_trace) > w and best_trace[-w - 1] - best_trace[-1] < budget.tolerance:
            log.info("converged after %d evaluations", len(Y))
            break
    k = int(np.argmin(Y))
    return TuneResult(history[k].gamma.copy(), float(Y[k]), history, shared)
