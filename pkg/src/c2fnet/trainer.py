"""Stagewise training: finest network end-to-end, then frozen-feature heads."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .model import C2FArchitecture, WeightStore, layer_params, save_weights, transform

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-4
    lr_decay_per_update: float = 1e-6
    rmsprop_smoothing: float = 0.9
    batch_size: int = 128
    epochs: int = 5
    augmentation: str = "none"
    augment_classifiers: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augmentation not in ("none", "flips_and_shifts"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,) int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def new_optimizer_state(params):
    return {"acc": [{k: np.zeros_like(v) for k, v in p.items()} for p in params], "t": 0}


def current_lr(cfg: TrainConfig, t: int) -> float:
    return cfg.learning_rate / (1.0 + cfg.lr_decay_per_update * t)


def rmsprop_step(params, grads, state, cfg: TrainConfig):
    """In-place update of a list of layer parameter dicts.

    ``acc <- rho*acc + (1-rho)*g^2``, ``p <- p - lr_t*g/(sqrt(acc)+1e-8)`` with
    ``lr_t = lr/(1 + decay*t)`` and ``t`` the number of earlier updates.
    """
    lr = current_lr(cfg, state["t"])
    rho = cfg.rmsprop_smoothing
    for p, g, acc in zip(params, grads, state["acc"]):
        for k, gk in g.items():
            if k not in acc:
                continue  # frozen statistics (batchnorm mean/var)
            if cfg.optimizer == "sgd":
                p[k] -= lr * gk
                continue
            a = acc[k]
            a *= rho
            a += (1.0 - rho) * gk * gk
            p[k] -= lr * gk / (np.sqrt(a) + 1e-8)
    state["t"] += 1
    return params, state


def _trainable(layers, params):
    """Parameter dicts restricted to what the optimizer may touch."""
    out = []
    for layer, p in zip(layers, params):
        if layer.kind == "batchnorm":
            out.append({})  # frozen inference-time affine transform
        else:
            out.append(p)
    return out


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def shift_image(img, dy, dx):
    """Translate an (H, W, C) image by (dy, dx) pixels, zero-filling the gap."""
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def augment(image, rng, shift_frac=0.1):
    """Random horizontal flip (p=0.5) and width/height shift up to 10% of each side."""
    h, w = image.shape[:2]
    out = image[:, ::-1] if rng.random() < 0.5 else image
    my, mx = int(round(shift_frac * h)), int(round(shift_frac * w))
    dy = int(rng.integers(-my, my + 1))
    dx = int(rng.integers(-mx, mx + 1))
    if dy or dx:
        out = shift_image(out, dy, dx)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _batch_grads(layers, params, x, y, n_total, workers):
    """Summed-then-normalized gradients; chunks reduced in fixed order."""
    def one(sl):
        probs, acts = nn.stack_forward(layers, params, x[sl], keep=True)
        loss, g, _ = nn.cross_entropy(probs, y[sl])
        k = len(y[sl])
        grads, _ = nn.stack_backward(layers, params, acts, g * (k / n_total))
        return loss * k, grads

    n = len(y)
    if workers <= 1 or n < 2 * workers:
        results = [one(slice(0, n))]
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
    loss = sum(r[0] for r in results) / n_total
    grads = results[0][1]
    for _, g in results[1:]:
        for acc, gi in zip(grads, g):
            for k in acc:
                acc[k] = acc[k] + gi[k]
    return loss, grads


def _epoch_batches(n, cfg, rng):
    order = rng.permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _augment_batch(x, cfg, rng):
    if cfg.augmentation == "none":
        return x
    return np.stack([augment(img, rng) for img in x])


def _fit(layers, params, make_inputs, data: Dataset, cfg: TrainConfig, stage: str):
    rng = np.random.default_rng(cfg.seed)
    state = new_optimizer_state(_trainable(layers, params))
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _epoch_batches(len(data), cfg, rng):
            x = make_inputs(data.inputs[idx], rng)
            y = data.labels[idx]
            loss, grads = _batch_grads(layers, params, x, y, len(idx), cfg.workers)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{stage}: loss became {loss} in epoch {epoch + 1}")
            rmsprop_step(_trainable(layers, params), grads, state, cfg)
            total += loss * len(idx)
        losses.append(total / max(len(data), 1))
        log.info("%s epoch %d/%d loss %.5f", stage, epoch + 1, cfg.epochs, losses[-1])
    return losses, state


def train_feature_transformers(arch: C2FArchitecture, store: WeightStore, train: Dataset,
                               cfg: TrainConfig):
    """Train every transformer block plus the finest classifier end-to-end.

    Returns ``(new_store, epoch_losses)``; the input store is not modified.
    """
    store = store.copy()
    t = arch.T
    layers = arch.feature_path(t) + arch.levels[t - 1].classifier
    params = [p for i in range(1, t + 1)
              for p in layer_params(store.alpha, i, len(arch.levels[i - 1].transformer))]
    params += layer_params(store.beta, t, len(arch.levels[t - 1].classifier))
    # keep references wired into the store
    store.alpha = [params[sum(len(l.transformer) for l in arch.levels[:i]):
                          sum(len(l.transformer) for l in arch.levels[:i + 1])] for i in range(t)]
    store.beta[t - 1] = params[len(arch.feature_path(t)):]
    losses, state = _fit(layers, params, lambda x, rng: _augment_batch(x, cfg, rng), train, cfg,
                         "train-features")
    store.optimizer_updates = state["t"]
    return store, losses


def train_intermediate_classifiers(arch: C2FArchitecture, store: WeightStore, train: Dataset,
                                   cfg: TrainConfig):
    """Fit each coarser classifier on frozen features; alpha and the finest head stay put."""
    store = store.copy()
    all_losses = []
    for level in range(1, arch.T):
        layers = arch.levels[level - 1].classifier
        params = layer_params(store.beta, level, len(layers))
        store.beta[level - 1] = params

        def features(x, rng, level=level):
            if cfg.augment_classifiers:
                x = _augment_batch(x, cfg, rng)
            for i in range(1, level + 1):
                x = transform(arch, store, x, i)
            return x

        losses, _ = _fit(layers, params, features, train, cfg, f"train-classifier-{level}")
        all_losses.append(losses)
    return store, all_losses


def accuracy(arch, store, data: Dataset, level=None, batch=256) -> float:
    """Fraction of ``data`` a single level (default finest) labels correctly."""
    from .model import forward_to_level
    level = level or arch.T
    if len(data) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(data), batch):
        _, probs = forward_to_level(arch, store, data.inputs[s:s + batch], level)
        hits += int((probs.argmax(axis=1) == data.labels[s:s + batch]).sum())
    return hits / len(data)


def save_checkpoint(store: WeightStore, path, cfg: TrainConfig, stage: str) -> None:
    """Weight file plus a JSON sidecar describing the optimizer run."""
    path = Path(path)
    save_weights(store, path)
    meta = {"stage": stage, "train_config": asdict(cfg),
            "optimizer_updates": int(getattr(store, "optimizer_updates", 0)),
            "final_lr": current_lr(cfg, int(getattr(store, "optimizer_updates", 0)))}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
