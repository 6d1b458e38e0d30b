"""Early-exit inference, confidence scores, and the per-level evaluation table."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import CostProfile
from .model import classify, transform

KINDS = ("max_prob", "margin", "entropy")

# Above every attainable confidence, so no early exit ever fires.
NEVER_EXIT = 1.0 + 1e-9


def confidence(dist, kind: str = "max_prob") -> float:
    """Confidence in [0, 1] of a probability vector; larger is more confident.

    ``entropy`` is reported as ``1 - H(p)/ln K``.
    """
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or len(p) < 2:
        raise ValueError("confidence needs a probability vector with at least 2 entries")
    if abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ValueError(f"distribution is not normalized (sum={p.sum():.9f})")
    return float(confidence_rows(p[None], kind)[0])


def confidence_rows(probs, kind="max_prob"):
    """Row-wise confidence for an ``(N, K)`` array of distributions (no validation)."""
    probs = np.asarray(probs, dtype=np.float64)
    if kind == "max_prob":
        return probs.max(axis=1)
    if kind == "margin":
        top2 = np.sort(probs, axis=1)[:, -2:]
        return top2[:, 1] - top2[:, 0]
    if kind == "entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
        h = -plogp.sum(axis=1)
        return np.clip(1.0 - h / np.log(probs.shape[1]), 0.0, 1.0)
    raise ValueError(f"unknown confidence kind {kind!r}; expected one of {KINDS}")


def check_thresholds(thresholds, T):
    g = np.asarray([] if thresholds is None else thresholds, dtype=np.float64).reshape(-1)
    if len(g) != T - 1:
        raise ValueError(f"need {T - 1} thresholds for a {T}-level network, got {len(g)}")
    bad = ~(((g >= 0) & (g <= 1)) | (g == NEVER_EXIT))
    if bad.any():
        raise ValueError(f"thresholds must lie in [0, 1] (or be NEVER_EXIT): {g.tolist()}")
    return g


@dataclass
class PredictionTrace:
    exit_level: int
    label: int
    per_level: list = field(default_factory=list)  # (distribution, confidence) per visited level
    labels: list = field(default_factory=list)  # argmax at every visited level


def cascade_predict(x, arch, store, thresholds, kind="max_prob") -> PredictionTrace:
    """Run levels 1..T on one ``(H, W, C)`` input, stopping at the first confident level."""
    g = check_thresholds(thresholds, arch.T)
    feats = np.asarray(x)[None]
    trace = PredictionTrace(0, -1)
    for i in range(1, arch.T + 1):
        feats = transform(arch, store, feats, i)
        dist = classify(arch, store, feats, i)[0]
        t = float(confidence_rows(dist[None], kind)[0])
        y_hat = int(np.argmax(dist))  # first maximum: ties go to the lowest index
        trace.per_level.append((dist, t))
        trace.labels.append(y_hat)
        if i == arch.T or t >= g[i - 1]:
            trace.exit_level = i
            trace.label = y_hat
            break
    return trace


# --------------------------------------------------------------------------
# evaluation table
# --------------------------------------------------------------------------

@dataclass
class EvalTable:
    predicted: np.ndarray  # (N, T) int
    confidence: np.ndarray  # (N, T) float64
    true_label: np.ndarray  # (N,) int
    costs: np.ndarray  # (T,) cumulative level costs
    kind: str = "max_prob"

    @property
    def T(self) -> int:
        return len(self.costs)

    def __len__(self):
        return len(self.true_label)

    def level_accuracy(self) -> np.ndarray:
        return (self.predicted == self.true_label[:, None]).mean(axis=0)


def _full_pass(x, arch, store, kind):
    feats = np.asarray(x)[None]
    labels, confs = [], []
    for i in range(1, arch.T + 1):
        feats = transform(arch, store, feats, i)
        dist = classify(arch, store, feats, i)[0]
        labels.append(int(np.argmax(dist)))
        confs.append(float(confidence_rows(dist[None], kind)[0]))
    return labels, confs


def build_eval_table(data, arch, store, kind="max_prob", cost: CostProfile | None = None,
                     workers=1) -> EvalTable:
    """Evaluate every level on every example once (no early exit).

    Examples are run one at a time, exactly as :func:`cascade_predict` sees
    them, so table entries match direct inference bit for bit.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown confidence kind {kind!r}")
    if cost is None:
        from .cost import analytic_profile
        cost = analytic_profile(arch)
    if len(cost.costs) != arch.T:
        raise ValueError("cost profile has the wrong number of levels")
    n = len(data)
    run = lambda k: _full_pass(data.inputs[k], arch, store, kind)
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run, range(n)))
    else:
        rows = [run(k) for k in range(n)]
    pred = np.array([r[0] for r in rows], dtype=np.int64).reshape(n, arch.T)
    conf = np.array([r[1] for r in rows], dtype=np.float64).reshape(n, arch.T)
    return EvalTable(pred, conf, np.asarray(data.labels, dtype=np.int64).copy(),
                     cost.costs.copy(), kind)


def exit_levels(table: EvalTable, thresholds) -> np.ndarray:
    """0-based exit level of every example for the given thresholds."""
    g = check_thresholds(thresholds, table.T)
    if table.T == 1 or len(table) == 0:
        return np.zeros(len(table), dtype=np.int64)
    hit = table.confidence[:, :-1] >= g
    return np.where(hit.any(axis=1), hit.argmax(axis=1), table.T - 1)


@dataclass
class ObjectiveResult:
    objective: float
    error_norm: float
    energy_norm: float
    exit_histogram: np.ndarray
    error: float  # raw cascade 0/1 error
    absolute_error_used: bool = False


def evaluate_objective(table: EvalTable, thresholds, lam: float) -> ObjectiveResult:
    """``lam * error_norm + (1 - lam) * energy_norm`` relative to always using the finest level."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    n = len(table)
    if n == 0:
        raise ValueError("cannot evaluate thresholds on an empty table")
    ex = exit_levels(table, thresholds)
    y_hat = table.predicted[np.arange(n), ex]
    err = float(np.mean(y_hat != table.true_label))
    base = float(np.mean(table.predicted[:, -1] != table.true_label))
    absolute = base == 0.0
    err_norm = err if absolute else err / base
    hist = np.bincount(ex, minlength=table.T)
    energy = float(hist @ table.costs) / n
    energy_norm = energy / float(table.costs[-1])
    obj = lam * err_norm + (1.0 - lam) * energy_norm
    return ObjectiveResult(obj, err_norm, energy_norm, hist, err, absolute)


def per_level_exit_accuracy(table: EvalTable, thresholds) -> list:
    """Accuracy over the examples that exit at each level (None where nobody exits)."""
    ex = exit_levels(table, thresholds)
    out = []
    for i in range(table.T):
        m = ex == i
        out.append(float(np.mean(table.predicted[m, i] == table.true_label[m])) if m.any() else None)
    return out


# columnar file: magic, version, N, T, kind-code, then labels, predictions, confidences, costs
TABLE_MAGIC = b"C2FT"
TABLE_VERSION = 1


def save_table(table: EvalTable, path) -> None:
    n, t = len(table), table.T
    head = TABLE_MAGIC + struct.pack("<IIII", TABLE_VERSION, n, t, KINDS.index(table.kind))
    body = (table.true_label.astype("<u4").tobytes()
            + table.predicted.astype("<u4").tobytes()
            + table.confidence.astype("<f8").tobytes()
            + table.costs.astype("<f8").tobytes())
    Path(path).write_bytes(head + body)


def load_table(path) -> EvalTable:
    buf = Path(path).read_bytes()
    if buf[:4] != TABLE_MAGIC:
        raise ValueError(f"{path}: not an evaluation table")
    version, n, t, kind = struct.unpack("<IIII", buf[4:20])
    if version != TABLE_VERSION:
        raise ValueError(f"{path}: unsupported table version {version}")
    need = 20 + 4 * n + 4 * n * t + 8 * n * t + 8 * t
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(buf)}")
    pos = 20

    def col(dtype, count):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    labels = col("<u4", n).astype(np.int64)
    pred = col("<u4", n * t).astype(np.int64).reshape(n, t)
    conf = col("<f8", n * t).astype(np.float64).reshape(n, t)
    costs = col("<f8", t).astype(np.float64)
    return EvalTable(pred, conf, labels, costs, KINDS[kind])
