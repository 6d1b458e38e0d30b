"""DIRECT (DIviding RECTangles) global maximization on the unit hypercube."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DirectResult:
    x: np.ndarray
    value: float
    evaluations: int
    points: list = field(default_factory=list, repr=False)


def _potentially_optimal(sizes, vals, fmin, eps):
    """Indices on the lower-right convex hull of (size, value) passing the eps test."""
    best = {}
    for i, (d, v) in enumerate(zip(sizes, vals)):
        if d not in best or v < vals[best[d]]:
            best[d] = i
    ds = sorted(best)
    picked = []
    for k, d in enumerate(ds):
        j = best[d]
        hj = vals[j]
        k_low = max(((hj - vals[best[e]]) / (d - e) for e in ds[:k]), default=-np.inf)
        k_up = min(((vals[best[e]] - hj) / (e - d) for e in ds[k + 1:]), default=np.inf)
        if k_low > k_up:
            continue
        if np.isfinite(k_up) and hj - k_up * d > fmin - eps * abs(fmin):
            continue
        picked.append(j)
    return sorted(picked)


def direct_maximize(f, dim: int, budget: int = 200, eps: float = 1e-4) -> DirectResult:
    """Maximize ``f`` over ``[0, 1]^dim`` with at most ``budget`` evaluations.

    Deterministic.  Every sampled point is a rectangle centre, so nothing
    outside the box is ever evaluated.
    """
    if dim < 1 or budget < 1:
        raise ValueError("need dim >= 1 and budget >= 1")
    centers = [np.full(dim, 0.5)]
    levels = [np.zeros(dim, dtype=np.int64)]
    vals = [-float(f(centers[0]))]  # minimize the negation
    points = [centers[0].copy()]
    evals = 1

    def size(lv):
        return 0.5 * float(np.sqrt(np.sum(3.0 ** (-2 * np.sort(lv)))))

    sizes = [size(levels[0])]
    while evals < budget:
        fmin = min(vals)
        chosen = _potentially_optimal(sizes, vals, fmin, eps)
        progressed = False
        for j in chosen:
            lv = levels[j]
            split_dims = np.flatnonzero(lv == lv.min())
            delta = 3.0 ** (-(lv.min() + 1))
            samples = {}
            for i in split_dims:
                if evals + 2 > budget:
                    break
                for s in (1, -1):
                    c = centers[j].copy()
                    c[i] += s * delta
                    samples[(i, s)] = (c, -float(f(c)))
                    points.append(c)
                    evals += 1
            done = [i for i in split_dims if (i, 1) in samples]
            if not done:
                break
            progressed = True
            order = sorted(done, key=lambda i: (min(samples[(i, 1)][1], samples[(i, -1)][1]), i))
            cur = lv.copy()
            for i in order:
                cur[i] += 1
                for s in (1, -1):
                    c, v = samples[(i, s)]
                    centers.append(c)
                    levels.append(cur.copy())
                    vals.append(v)
                    sizes.append(size(cur))
            levels[j] = cur
            sizes[j] = size(cur)
        if not progressed:
            break
    k = int(np.argmin(vals))
    return DirectResult(centers[k].copy(), -vals[k], evals, points)
