"""End-to-end experiment: data, stagewise training, threshold search, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import cascade, cost as costmod, data as datamod
from .bo import AcquisitionConfig, BOBudget, optimize_thresholds
from .model import C2FArchitecture, build_network, load_weights
from .trainer import Dataset, TrainConfig, save_checkpoint, train_feature_transformers, \
    train_intermediate_classifiers

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "C2F_DATA_ROOT"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    architecture: str = "mnist_3level"
    dataset: str = "mnist"
    data_root: str | None = None
    subset_size: int | None = 9000
    split_ratio: tuple = (4, 1, 1)
    confidence_kind: str = "max_prob"
    cost: str = "mac"
    lambdas: tuple = (0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0)
    train: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "epochs": 5})
    # 60 evaluations per search; the window equals the budget so no early stop fires
    bo: dict = field(default_factory=lambda: {"max_iterations": 60, "window": 60})
    ucb_beta: float = 4.0
    ucb_schedule: str = "fixed"
    single_threshold: bool = True
    warm_start_from_single: bool = True
    seed: int = 0
    workers: int = 1
    strict: bool = True
    precision: str = "f64"
    output_dir: str = "c2f_out"
    config_dir: str | None = None  # where relative paths in the config resolve from

    def __post_init__(self):
        r = np.asarray(self.split_ratio, dtype=float)
        if r.shape != (3,) or (r < 0).any() or r.sum() <= 0:
            raise ValueError(f"split_ratio must be three non-negative weights, got {self.split_ratio}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.confidence_kind not in cascade.KINDS:
            raise ValueError(f"confidence_kind must be one of {cascade.KINDS}")
        for lam in self.lambdas:
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda {lam} outside [0, 1]")
        self.split_ratio = tuple(self.split_ratio)
        self.lambdas = tuple(float(v) for v in self.lambdas)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        raw = json.loads(path.read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        raw.setdefault("config_dir", str(path.parent.resolve()))
        return cls(**raw)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def train_config(self) -> TrainConfig:
        kw = {"seed": self.seed, **self.train}
        kw["workers"] = 1 if self.strict else self.workers
        return TrainConfig(**kw)

    def bo_budget(self) -> BOBudget:
        return BOBudget(**self.bo)

    def acquisition(self) -> AcquisitionConfig:
        return AcquisitionConfig(self.ucb_beta, self.ucb_schedule)

    def digest(self, *keys) -> str:
        """Hash of the settings that determine results (paths and worker counts excluded)."""
        d = asdict(self)
        for k in ("output_dir", "config_dir", "data_root", "workers"):
            d.pop(k)
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def resolve_architecture(cfg: ExperimentConfig) -> C2FArchitecture:
    name = cfg.architecture
    cands = []
    if cfg.config_dir:
        cands.append(Path(cfg.config_dir) / name)
    cands.append(Path(name))
    for p in cands:
        if p.is_file():
            return C2FArchitecture.from_json(p)
    builtin = resources.files("c2fnet") / "configs" / f"{Path(name).stem}.json"
    if builtin.is_file():
        return C2FArchitecture.from_config(json.loads(builtin.read_text()))
    raise FileNotFoundError(f"architecture {name!r} not found")


def resolve_data_root(cfg: ExperimentConfig) -> Path:
    root = cfg.data_root or os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise FileNotFoundError(f"no dataset root: set data_root in the config or ${DATA_ROOT_ENV}")
    root = Path(root)
    if not root.is_absolute() and cfg.config_dir:
        root = Path(cfg.config_dir) / root
    return root


def load_splits(cfg: ExperimentConfig):
    root = resolve_data_root(cfg)
    if cfg.dataset == "mnist":
        full = datamod.load_mnist(root, dtype=cfg.dtype)
    elif cfg.dataset == "cifar10":
        full = datamod.load_cifar10(root, dtype=cfg.dtype)
    else:
        raise ValueError(f"unknown dataset {cfg.dataset!r}")
    if cfg.subset_size:
        full = datamod.stratified_subset(full, cfg.subset_size, cfg.seed)
    return datamod.split_dataset(full, cfg.split_ratio, cfg.seed)


# --------------------------------------------------------------------------
# stages with on-disk checkpoints
# --------------------------------------------------------------------------

class Workspace:
    """Artifacts of one experiment; a stage is skipped when its manifest matches."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "stages.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    def done(self, stage, key) -> bool:
        return self.manifest.get(stage) == key

    def mark(self, stage, key):
        self.manifest[stage] = key
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def path(self, name) -> Path:
        return self.root / name


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        return run
    return wrap


@_stage("train-features")
def stage_features(ws: Workspace, arch, train: Dataset):
    cfg = ws.cfg
    key = cfg.digest("architecture", "dataset", "subset_size", "split_ratio", "train", "seed", "precision")
    path = ws.path("alpha.c2fw")
    if ws.done("train-features", key) and path.exists():
        log.info("train-features: reusing %s", path)
        return load_weights(path, arch, cfg.dtype)
    store = build_network(arch, cfg.seed, cfg.dtype)
    store, losses = train_feature_transformers(arch, store, train, cfg.train_config())
    save_checkpoint(store, path, cfg.train_config(), "train-features")
    ws.mark("train-features", key)
    return store


@_stage("train-classifiers")
def stage_classifiers(ws: Workspace, arch, store, train: Dataset):
    cfg = ws.cfg
    key = ws.manifest.get("train-features", "") + "/" + cfg.digest("train")
    path = ws.path("weights.c2fw")
    if ws.done("train-classifiers", key) and path.exists():
        log.info("train-classifiers: reusing %s", path)
        return load_weights(path, arch, cfg.dtype)
    store, _ = train_intermediate_classifiers(arch, store, train, cfg.train_config())
    save_checkpoint(store, path, cfg.train_config(), "train-classifiers")
    ws.mark("train-classifiers", key)
    return store


def cost_profile(cfg: ExperimentConfig, arch, store=None, sample=None) -> costmod.CostProfile:
    provider = cfg.cost
    if provider == "mac":
        return costmod.analytic_profile(arch)
    if provider == "latency":
        if store is None or sample is None:
            raise ValueError("latency costs need trained weights and sample inputs")
        return costmod.latency_profile(arch, store, sample[:64], reps=5)
    if provider.startswith("table:"):
        path = Path(provider[len("table:"):])
        if not path.is_absolute() and cfg.config_dir:
            path = Path(cfg.config_dir) / path
        return costmod.user_table_profile(path)
    raise ValueError(f"unknown cost provider {provider!r}")


@_stage("table")
def stage_tables(ws: Workspace, arch, store, val: Dataset, test: Dataset):
    cfg = ws.cfg
    prof = cost_profile(cfg, arch, store, val.inputs)
    key = ws.manifest.get("train-classifiers", "") + "/" + cfg.digest("confidence_kind") \
        + "/" + hashlib.sha256(prof.costs.tobytes()).hexdigest()[:8]
    vp, tp = ws.path("val_table.c2ft"), ws.path("test_table.c2ft")
    if ws.done("table", key) and vp.exists() and tp.exists():
        return cascade.load_table(vp), cascade.load_table(tp), prof
    vt = cascade.build_eval_table(val, arch, store, cfg.confidence_kind, prof, cfg.workers)
    tt = cascade.build_eval_table(test, arch, store, cfg.confidence_kind, prof, cfg.workers)
    cascade.save_table(vt, vp)
    cascade.save_table(tt, tp)
    ws.path("cost_profile.json").write_text(json.dumps(prof.to_dict(), indent=2, sort_keys=True))
    ws.mark("table", key)
    return vt, tt, prof


# --------------------------------------------------------------------------
# report rows
# --------------------------------------------------------------------------

ROW_FIELDS = ("mode", "lam", "gamma", "val_objective", "val_error_norm", "val_energy_norm",
              "val_accuracy", "val_exit_histogram", "test_objective", "test_accuracy", "test_error_norm",
              "test_energy_norm", "test_exit_histogram", "test_level_accuracy", "seed",
              "evaluations")


def _row(mode, lam, gamma, val_table, test_table, seed, evaluations):
    gamma = np.asarray(gamma, dtype=np.float64)
    lam_eval = 0.5 if lam is None else lam
    rv = cascade.evaluate_objective(val_table, gamma, lam_eval)
    rt = cascade.evaluate_objective(test_table, gamma, lam_eval)
    lvl = cascade.per_level_exit_accuracy(test_table, gamma)
    return {
        "mode": mode,
        "lam": lam,
        "gamma": [float(g) for g in gamma],
        "val_objective": rv.objective if lam is not None else None,
        "val_error_norm": rv.error_norm,
        "val_energy_norm": rv.energy_norm,
        "val_accuracy": 1.0 - rv.error,
        "val_exit_histogram": [int(h) for h in rv.exit_histogram],
        "test_objective": rt.objective if lam is not None else None,
        "test_accuracy": 1.0 - rt.error,
        "test_error_norm": rt.error_norm,
        "test_energy_norm": rt.energy_norm,
        "test_exit_histogram": [int(h) for h in rt.exit_histogram],
        "test_level_accuracy": lvl,
        "seed": seed,
        "evaluations": evaluations,
    }


def fixed_level_gamma(T, level):
    """Thresholds that force every example to exit at ``level`` (1-based)."""
    g = np.full(T - 1, cascade.NEVER_EXIT)
    if level < T:
        g[level - 1] = 0.0
    return g


def baseline_rows(val_table, test_table, seed):
    T = val_table.T
    return [_row(f"baseline_level_{i}", None, fixed_level_gamma(T, i), val_table, test_table, seed, 0)
            for i in range(1, T + 1)]


def _write_history(path, result):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        d = len(result.history[0].gamma) if result.history else 0
        w.writerow(["iteration", *[f"gamma_{i + 1}" for i in range(d)], "objective",
                    "error_norm", "energy_norm", "exit_histogram", "source"])
        for h in result.history:
            w.writerow([h.iteration, *[repr(float(g)) for g in h.gamma], repr(h.objective),
                        repr(h.error_norm), repr(h.energy_norm),
                        ";".join(str(int(c)) for c in h.exit_histogram), h.source])


def tune_rows(cfg: ExperimentConfig, val_table, test_table, lambdas, outdir: Path | None,
              single=True, multi=True):
    """Single-threshold and multi-threshold rows for each lambda."""
    rows = []
    budget, acq = cfg.bo_budget(), cfg.acquisition()
    for lam in lambdas:
        warm = None
        if single and val_table.T > 1:
            rs = optimize_thresholds(val_table, lam, budget=budget, acq=acq, seed=cfg.seed, shared=True)
            rows.append(_row("single_threshold", lam, rs.gamma, val_table, test_table, cfg.seed,
                             len(rs.history)))
            if outdir is not None:
                _write_history(outdir / f"history_single_lambda_{lam:g}.csv", rs)
            if cfg.warm_start_from_single:
                warm = [rs.gamma]
        if multi:
            rm = optimize_thresholds(val_table, lam, budget=budget, acq=acq, seed=cfg.seed,
                                     warm_start=warm)
            rows.append(_row("multi_threshold", lam, rm.gamma, val_table, test_table, cfg.seed,
                             len(rm.history)))
            if outdir is not None:
                _write_history(outdir / f"history_lambda_{lam:g}.csv", rm)
    return rows


@dataclass
class SweepReport:
    rows: list
    metadata: dict

    def select(self, mode):
        return [r for r in self.rows if r["mode"] == mode]


def _prepare(cfg: ExperimentConfig):
    ws = Workspace(cfg)
    try:
        arch = resolve_architecture(cfg)
        train, val, test = load_splits(cfg)
    except Exception as exc:  # noqa: BLE001
        raise StageError("data", f"{type(exc).__name__}: {exc}") from exc
    store = stage_features(ws, arch, train)
    store = stage_classifiers(ws, arch, store, train)
    vt, tt, prof = stage_tables(ws, arch, store, val, test)
    return ws, arch, (train, val, test), vt, tt, prof


def run_single_threshold_mode(cfg: ExperimentConfig, lambdas=None) -> list:
    """Rows for one threshold shared by every level, reusing the pipeline's tables."""
    ws, _, _, vt, tt, _ = _prepare(cfg)
    lambdas = cfg.lambdas if lambdas is None else tuple(lambdas)
    try:
        return tune_rows(cfg, vt, tt, lambdas, ws.root, single=True, multi=False)
    except Exception as exc:  # noqa: BLE001
        raise StageError("tune", f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg: ExperimentConfig, lambdas=None, single=None) -> SweepReport:
    """Train (features, then heads), tabulate the validation split, tune per lambda,
    and score every tuned configuration on the untouched test split."""
    lambdas = cfg.lambdas if lambdas is None else tuple(lambdas)
    single = cfg.single_threshold if single is None else single
    ws, arch, (train, val, test), vt, tt, prof = _prepare(cfg)
    try:
        rows = baseline_rows(vt, tt, cfg.seed)
        rows += tune_rows(cfg, vt, tt, lambdas, ws.root, single=single)
    except Exception as exc:  # noqa: BLE001
        raise StageError("tune", f"{type(exc).__name__}: {exc}") from exc
    meta = {
        "config_hash": cfg.digest(),
        "config": {k: v for k, v in asdict(cfg).items()
                   if k not in ("output_dir", "config_dir", "data_root", "workers")},
        "seed": cfg.seed,
        "levels": arch.T,
        "split_sizes": [len(train), len(val), len(test)],
        "cost_profile": prof.to_dict(),
        "constant_power_edp_assumption": prof.provider == "measured_latency",
        "lambdas": list(lambdas),
    }
    report = SweepReport(rows, json.loads(json.dumps(meta)))  # same types as a reloaded report
    emit_report(report, ws.root)
    return report


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return ";".join("" if x is None else (repr(float(x)) if isinstance(x, float) else str(x))
                        for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_to_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in report.rows:
        w.writerow([_cell(r[k]) for k in ROW_FIELDS])
    return buf.getvalue()


_INT_LISTS = {"val_exit_histogram", "test_exit_histogram"}
_FLOAT_LISTS = {"gamma", "test_level_accuracy"}
_INTS = {"seed", "evaluations"}


def rows_from_csv(text: str) -> list:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k in ROW_FIELDS:
            v = rec[k]
            if k == "mode":
                row[k] = v
            elif k in _INT_LISTS:
                row[k] = [int(x) for x in v.split(";")] if v else []
            elif k in _FLOAT_LISTS:
                row[k] = [None if x == "" else float(x) for x in v.split(";")] if v else []
            elif k in _INTS:
                row[k] = int(v)
            else:
                row[k] = None if v == "" else float(v)
        rows.append(row)
    return rows


def pareto_columns(report: SweepReport, mode="multi_threshold") -> str:
    """Whitespace columns (energy, accuracy, lambda) sorted by energy, gnuplot-ready."""
    rows = sorted(report.select(mode), key=lambda r: (r["test_energy_norm"], -r["test_accuracy"]))
    lines = ["# test_energy_norm test_accuracy val_energy_norm val_accuracy lambda"]
    for r in rows:
        lines.append(f"{r['test_energy_norm']!r} {r['test_accuracy']!r} {r['val_energy_norm']!r} "
                     f"{r['val_accuracy']!r} {r['lam']!r}")
    return "\n".join(lines) + "\n"


def pareto_front(points):
    """Indices of (energy, accuracy) points not dominated by any other point."""
    pts = list(points)
    keep = []
    for i, (e, a) in enumerate(pts):
        if not any((e2 <= e and a2 >= a) and (e2 < e or a2 > a) for e2, a2 in pts):
            keep.append(i)
    return keep


def emit_report(report: SweepReport, outdir, formats=("json", "csv", "pareto")) -> list:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = outdir / "report.json"
        p.write_text(json.dumps({"metadata": report.metadata, "rows": report.rows},
                                indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        p = outdir / "report.csv"
        p.write_text(report_to_csv(report))
        written.append(p)
    if "pareto" in formats:
        for mode in ("multi_threshold", "single_threshold"):
            if report.select(mode):
                p = outdir / f"pareto_{mode}.dat"
                p.write_text(pareto_columns(report, mode))
                written.append(p)
    return written


def load_report(path) -> SweepReport:
    raw = json.loads(Path(path).read_text())
    return SweepReport(raw["rows"], raw["metadata"])
