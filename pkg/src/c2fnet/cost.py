"""Per-level inference cost: analytic MAC counts, measured latency, or a user table."""
from __future__ import annotations

import csv
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .model import C2FArchitecture, classify, transform

CONSTANT_POWER_ASSUMPTION = (
    "EDP proxy = latency^2; average power assumed constant across levels (no power measurement)")

_measure_lock = threading.Lock()


@dataclass
class CostProfile:
    costs: np.ndarray  # c_1..c_T, cumulative
    provider: str = "analytic_mac"
    assumptions: list = field(default_factory=list)

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 1 or len(self.costs) == 0:
            raise ValueError("cost profile needs one cost per level")
        if (self.costs <= 0).any():
            raise ValueError(f"level costs must be positive, got {self.costs.tolist()}")
        if (np.diff(self.costs) < 0).any():
            raise ValueError(f"cumulative level costs must be non-decreasing, got {self.costs.tolist()}")

    @property
    def normalized(self) -> np.ndarray:
        return self.costs / self.costs[-1]

    def to_dict(self) -> dict:
        return {"provider": self.provider, "costs": self.costs.tolist(),
                "normalized": self.normalized.tolist(), "assumptions": list(self.assumptions)}


def layer_macs(layer: nn.LayerSpec, input_shape) -> int:
    """Multiply-accumulates of one layer on one example (pool/relu/softmax/flatten: 0)."""
    out = nn.output_shape(layer, input_shape)
    if layer.kind == "conv3x3":
        h, w, _ = input_shape
        return h * w * 9 * layer.in_channels * layer.out_channels
    if layer.kind == "dense":
        return layer.in_dim * layer.out_dim
    del out
    return 0


def level_breakdown(arch: C2FArchitecture, level: int) -> dict:
    """MACs of the level-``level`` inference path split into transformer and classifier parts."""
    shape = tuple(arch.input_shape)
    feat = 0
    for layer in arch.feature_path(level):
        feat += layer_macs(layer, shape)
        shape = nn.output_shape(layer, shape)
    head = 0
    for layer in arch.levels[level - 1].classifier:
        head += layer_macs(layer, shape)
        shape = nn.output_shape(layer, shape)
    return {"transformer": feat, "classifier": head, "total": feat + head}


def cumulative_level_cost(arch: C2FArchitecture, level: int):
    """``(raw MACs, MACs / finest-level MACs)`` for transformers 1..level plus head ``level``."""
    if not 1 <= level <= arch.T:
        raise ValueError(f"level must be in [1, {arch.T}]")
    raw = level_breakdown(arch, level)["total"]
    return raw, raw / level_breakdown(arch, arch.T)["total"]


def analytic_profile(arch: C2FArchitecture) -> CostProfile:
    costs = [cumulative_level_cost(arch, i)[0] for i in range(1, arch.T + 1)]
    return CostProfile(costs, "analytic_mac",
                       ["unit energy per MAC; pooling/activation/softmax counted as 0"])


def user_table_profile(path) -> CostProfile:
    """Read a ``level,cost`` CSV (1-based levels, header row optional)."""
    rows = {}
    with open(path, newline="") as f:
        for rec in csv.reader(f):
            if not rec or rec[0].strip().lower() == "level":
                continue
            rows[int(rec[0])] = float(rec[1])
    levels = sorted(rows)
    if levels != list(range(1, len(levels) + 1)):
        raise ValueError(f"{path}: levels must be 1..T, got {levels}")
    return CostProfile([rows[i] for i in levels], "user_table", [f"costs read from {Path(path).name}"])


@dataclass
class LatencySample:
    level: object  # int or "cascade"
    seconds: float  # median wall-clock per example
    reps: int
    cv: float
    edp_proxy: float

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError("latency measurement needs at least 3 repetitions")
        if self.seconds <= 0:
            raise ValueError("latency must be positive")


def _run_level(arch, store, x, level):
    for i in range(1, level + 1):
        x = transform(arch, store, x, i)
    return classify(arch, store, x, level)


def measure_latency_edp(arch, store, inputs, level, reps=5, thresholds=None, kind="max_prob"):
    """Median per-example wall-clock time of a fixed level or of the cascade.

    A warm-up pass is run and discarded.  Refuses to run while another
    measurement is in progress.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if not _measure_lock.acquire(blocking=False):
        raise RuntimeError("latency measurement already running; it needs exclusive use")
    try:
        if level == "cascade":
            from .cascade import cascade_predict

            def run():
                for x in inputs:
                    cascade_predict(x, arch, store, thresholds, kind)
        else:
            batch = np.asarray(inputs)

            def run():
                for x in batch:
                    _run_level(arch, store, x[None], level)

        run()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            times.append((time.perf_counter() - t0) / max(len(inputs), 1))
    finally:
        _measure_lock.release()
    times = np.asarray(times)
    med = float(np.median(times))
    res = time.get_clock_info("perf_counter").resolution
    if med * max(len(inputs), 1) < 100 * res:
        warnings.warn("median latency is below 100 timer ticks; results are unreliable", stacklevel=2)
    return LatencySample(level, med, reps, float(times.std() / times.mean()), med * med)


def latency_profile(arch, store, inputs, reps=5) -> CostProfile:
    """Per-level EDP proxy ``t_i^2`` under a constant-power assumption."""
    samples = [measure_latency_edp(arch, store, inputs, i, reps) for i in range(1, arch.T + 1)]
    edp = np.array([s.edp_proxy for s in samples])
    notes = [CONSTANT_POWER_ASSUMPTION]
    mono = np.maximum.accumulate(edp)
    if (mono != edp).any():
        notes.append("measured latencies were not monotone in level; running maximum applied")
    return CostProfile(mono, "measured_latency", notes)
