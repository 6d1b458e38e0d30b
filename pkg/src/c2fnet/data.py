"""MNIST (IDX) and CIFAR-10 (binary batch) readers plus stratified splitting."""
from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from .trainer import Dataset

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 32 * 32 * 3


class DatasetFormatError(ValueError):
    pass


def _open(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _find(root: Path, stem: str):
    for cand in (root / stem, root / (stem + ".gz"), root / stem.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    return None


def read_idx_images(path) -> np.ndarray:
    buf = _open(Path(path))
    if len(buf) < 16:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"{path}: bad IDX image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise DatasetFormatError(f"{path}: truncated, {len(buf)} bytes < {need}")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _open(Path(path))
    if len(buf) < 8:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"{path}: bad IDX label magic {magic}, expected {IDX_LABELS_MAGIC}")
    if len(buf) < 8 + n:
        raise DatasetFormatError(f"{path}: truncated, {len(buf)} bytes < {8 + n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_mnist(root, num_classes=10, dtype=np.float64) -> Dataset:
    """All MNIST images under ``root`` (train and t10k files if both exist).

    Images are zero-padded from 28x28 to 32x32, scaled to [0, 1], one channel.
    """
    root = Path(root)
    xs, ys = [], []
    for prefix in ("train", "t10k"):
        img = _find(root, f"{prefix}-images-idx3-ubyte")
        lab = _find(root, f"{prefix}-labels-idx1-ubyte")
        if img is None and lab is None:
            continue
        if img is None or lab is None:
            raise DatasetFormatError(f"{root}: {prefix} images and labels must both be present")
        x, y = read_idx_images(img), read_idx_labels(lab)
        if len(x) != len(y):
            raise DatasetFormatError(f"{prefix}: {len(x)} images but {len(y)} labels")
        xs.append(x)
        ys.append(y)
    if not xs:
        raise FileNotFoundError(f"no MNIST IDX files found under {root}")
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.int64)
    _check_labels(y, num_classes)
    h, w = x.shape[1:]
    ph, pw = (32 - h) // 2, (32 - w) // 2
    out = np.zeros((len(x), 32, 32, 1), dtype=dtype)
    out[:, ph:ph + h, pw:pw + w, 0] = x / dtype(255.0)
    return Dataset(out, y, "all")


def load_cifar10(root, dtype=np.float64) -> Dataset:
    """CIFAR-10 binary batches (``data_batch_*.bin`` then ``test_batch.bin``)."""
    root = Path(root)
    files = sorted(root.glob("data_batch_*.bin")) + sorted(root.glob("test_batch.bin"))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin batches under {root}")
    xs, ys = [], []
    for f in files:
        buf = f.read_bytes()
        if len(buf) % CIFAR_RECORD:
            raise DatasetFormatError(f"{f}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        # planes are R, G, B each 32x32 row-major -> channel-last
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    y = np.concatenate(ys)
    _check_labels(y, 10)
    return Dataset(np.concatenate(xs).astype(dtype) / dtype(255.0), y, "all")


def _check_labels(y, k):
    if len(y) and (y.min() < 0 or y.max() >= k):
        raise DatasetFormatError(f"labels outside [0, {k})")


def stratified_subset(data: Dataset, size: int, seed: int) -> Dataset:
    """Seeded class-balanced draw of ``size`` examples."""
    if size > len(data):
        raise ValueError(f"subset size {size} exceeds {len(data)} available examples")
    if size == len(data):
        return data
    idx = _stratified_partition(data.labels, [size, len(data) - size], seed)[0]
    return data.subset(np.sort(idx))


def split_dataset(data: Dataset, ratio=(4, 1, 1), seed=0):
    """Deterministic, class-stratified, disjoint and exhaustive train/val/test split."""
    ratio = np.asarray(ratio, dtype=float)
    if ratio.shape != (3,) or (ratio < 0).any() or ratio.sum() <= 0:
        raise ValueError(f"invalid split ratio {ratio.tolist()}")
    n = len(data)
    sizes = _largest_remainder(n, ratio / ratio.sum())
    parts = _stratified_partition(data.labels, sizes, seed)
    return tuple(data.subset(p, split) for p, split in zip(parts, ("train", "val", "test")))


def _largest_remainder(n, fracs):
    exact = np.asarray(fracs) * n
    sizes = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes


def _stratified_partition(labels, sizes, seed):
    """Split indices into groups of ``sizes`` keeping class counts within 1 of proportional."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    sizes = np.asarray(sizes)
    fracs = sizes / max(n, 1)
    classes = np.unique(labels)
    per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    if len(classes) and min(len(v) for v in per_class.values()) < (fracs > 0).sum():
        log.warning("dataset too small for stratification; using a plain shuffled split")
        order = rng.permutation(n)
        cut = np.cumsum(sizes)[:-1]
        return [np.sort(p) for p in np.split(order, cut)]
    counts = {c: np.floor(len(per_class[c]) * fracs).astype(int) for c in classes}
    need = sizes - sum(counts.values()) if classes.size else sizes.copy()
    # hand the leftovers out, at most one extra per (class, group), largest fraction first
    cands = []
    for c in classes:
        rem = len(per_class[c]) * fracs - counts[c]
        cands += [(-rem[g], int(c), g) for g in range(len(sizes))]
    cands.sort()
    left = {c: len(per_class[c]) - counts[c].sum() for c in classes}
    for _, c, g in cands:
        if left[c] > 0 and need[g] > 0:
            counts[c][g] += 1
            left[c] -= 1
            need[g] -= 1
    for c in classes:  # greedy leftovers, rare
        while left[c] > 0:
            g = int(np.argmax(need))
            counts[c][g] += 1
            left[c] -= 1
            need[g] -= 1
    parts = [[] for _ in sizes]
    for c in classes:
        cut = np.cumsum(counts[c])[:-1]
        for g, chunk in enumerate(np.split(per_class[c], cut)):
            parts[g].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]
