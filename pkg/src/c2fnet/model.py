"""Coarse-to-fine network description, parameters and weight files."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .tensor_nn import LayerSpec


class InvalidArchitecture(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


@dataclass
class LevelSpec:
    transformer: list[LayerSpec]
    classifier: list[LayerSpec]
    extra_pool_count: int = 0


@dataclass
class C2FArchitecture:
    levels: list[LevelSpec]
    num_classes: int
    input_shape: tuple

    @property
    def T(self) -> int:
        return len(self.levels)

    def feature_path(self, level: int) -> list[LayerSpec]:
        """Transformer layers run to produce the level-``level`` features (1-based)."""
        return [layer for lv in self.levels[:level] for layer in lv.transformer]

    def feature_shape(self, level: int) -> tuple:
        shape = tuple(self.input_shape)
        for layer in self.feature_path(level):
            shape = nn.output_shape(layer, shape)
        return shape

    def classifier_input_dim(self, level: int) -> int:
        """Flattened size entering the first dense layer of a level's classifier."""
        shape = self.feature_shape(level)
        for layer in self.levels[level - 1].classifier:
            if layer.kind == "dense":
                return int(np.prod(shape))
            shape = nn.output_shape(layer, shape)
        raise InvalidArchitecture(f"level {level} classifier has no dense layer")

    def validate(self) -> None:
        if self.T < 1:
            raise InvalidArchitecture("architecture needs at least one level")
        if self.num_classes < 2:
            raise InvalidArchitecture("num_classes must be >= 2")
        for i, lv in enumerate(self.levels, start=1):
            convs = [l for l in lv.transformer if l.kind == "conv3x3"]
            if not convs or lv.transformer[-1].kind != "maxpool2x2":
                raise InvalidArchitecture(
                    f"level {i}: transformer must hold conv3x3 layers and end in one maxpool2x2")
            if sum(l.kind == "maxpool2x2" for l in lv.transformer) != 1:
                raise InvalidArchitecture(f"level {i}: transformer must contain exactly one maxpool2x2")
            if not lv.classifier or lv.classifier[-1].kind != "softmax":
                raise InvalidArchitecture(f"level {i}: classifier must end with softmax")
            denses = [l for l in lv.classifier if l.kind == "dense"]
            if not denses or denses[-1].out_dim != self.num_classes:
                raise InvalidArchitecture(
                    f"level {i}: classifier must end with dense({self.num_classes}) + softmax")
            if lv.extra_pool_count and i == self.T:
                raise InvalidArchitecture("extra pooling is only allowed on non-final levels")
            if lv.extra_pool_count < 0:
                raise InvalidArchitecture(f"level {i}: extra_pool_count must be >= 0")
            if i > 1 and self.feature_path(i)[: len(self.feature_path(i - 1))] != self.feature_path(i - 1):
                raise InvalidArchitecture(f"level {i}: feature path is not cumulative")
            shape = tuple(self.input_shape)
            try:
                for layer in self.feature_path(i) + lv.classifier:
                    shape = nn.output_shape(layer, shape)
            except nn.ShapeError as exc:
                raise InvalidArchitecture(f"level {i}: {exc}") from None
        finest = self.classifier_input_dim(self.T)
        for i in range(1, self.T):
            d = self.classifier_input_dim(i)
            if not finest / 2 <= d <= finest * 2:
                warnings.warn(
                    f"level {i} classifier input dim {d} is not within 2x of the finest level's {finest}",
                    stacklevel=2)

    @classmethod
    def from_config(cls, cfg: dict) -> "C2FArchitecture":
        """Build from ``{input_shape, num_classes, levels: [{conv_layers, filters,
        extra_pools, classifier_hidden, batchnorm}]}``."""
        try:
            shape = tuple(int(v) for v in cfg["input_shape"])
            k = int(cfg["num_classes"])
            level_cfgs = cfg["levels"]
        except (KeyError, TypeError) as exc:
            raise InvalidArchitecture(f"malformed architecture config: {exc}") from None
        levels = []
        cin = shape[2]
        spatial = shape[:2]
        for i, lc in enumerate(level_cfgs, start=1):
            m, n = int(lc["conv_layers"]), int(lc["filters"])
            tr = []
            for j in range(m):
                tr.append(nn.conv3x3(cin, n, name=f"L{i}.conv{j}"))
                if lc.get("batchnorm", False):
                    tr.append(nn.batchnorm(n, name=f"L{i}.bn{j}"))
                tr.append(nn.simple("relu"))
                cin = n
            tr.append(nn.simple("maxpool2x2"))
            spatial = (spatial[0] // 2, spatial[1] // 2)
            extra = int(lc.get("extra_pools", 0))
            cl = [nn.simple("maxpool2x2") for _ in range(extra)]
            cl.append(nn.simple("flatten"))
            d = (spatial[0] >> extra) * (spatial[1] >> extra) * cin
            for h in lc.get("classifier_hidden", [256]):
                cl += [nn.dense(d, int(h)), nn.simple("relu")]
                d = int(h)
            cl += [nn.dense(d, k), nn.simple("softmax")]
            levels.append(LevelSpec(tr, cl, extra))
        arch = cls(levels, k, shape)
        arch.validate()
        return arch

    @classmethod
    def from_json(cls, path) -> "C2FArchitecture":
        return cls.from_config(json.loads(Path(path).read_text()))


@dataclass
class WeightStore:
    """alpha[i][j] / beta[i][j]: parameter dict of layer j in level i (0-based lists)."""
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)

    @property
    def dtype(self):
        for group in (self.alpha, self.beta):
            for level in group:
                for p in level:
                    for v in p.values():
                        return v.dtype
        return np.dtype(np.float64)

    def named_tensors(self):
        for tag, group in (("alpha", self.alpha), ("beta", self.beta)):
            for i, level in enumerate(group):
                for j, p in enumerate(level):
                    for k in sorted(p):
                        yield f"{tag}/{i}/{j}/{k}", p[k]

    def copy(self) -> "WeightStore":
        dup = lambda g: [[{k: v.copy() for k, v in p.items()} for p in lv] for lv in g]
        return WeightStore(dup(self.alpha), dup(self.beta))

    def astype(self, dtype) -> "WeightStore":
        conv = lambda g: [[{k: v.astype(dtype) for k, v in p.items()} for p in lv] for lv in g]
        return WeightStore(conv(self.alpha), conv(self.beta))

    def equals(self, other: "WeightStore") -> bool:
        a = list(self.named_tensors())
        b = list(other.named_tensors())
        return len(a) == len(b) and all(
            na == nb and va.dtype == vb.dtype and va.shape == vb.shape and va.tobytes() == vb.tobytes()
            for (na, va), (nb, vb) in zip(a, b))


def build_network(arch: C2FArchitecture, seed: int = 0, dtype=np.float64) -> WeightStore:
    arch.validate()
    rng = np.random.default_rng(seed)
    alpha = [[nn.init_params(l, rng, dtype) for l in lv.transformer] for lv in arch.levels]
    beta = [[nn.init_params(l, rng, dtype) for l in lv.classifier] for lv in arch.levels]
    return WeightStore(alpha, beta)


def transform(arch, store, x_prev, level):
    """Apply level ``level``'s transformer block to the previous level's features."""
    lv = arch.levels[level - 1]
    return nn.stack_forward(lv.transformer, layer_params(store.alpha, level, len(lv.transformer)), x_prev)


def classify(arch, store, feats, level):
    lv = arch.levels[level - 1]
    return nn.stack_forward(lv.classifier, layer_params(store.beta, level, len(lv.classifier)), feats)


def layer_params(group, level, n_layers):
    """Per-layer parameter dicts of a level, padded for parameter-free layers."""
    params = group[level - 1]
    if len(params) < n_layers:
        params = params + [{} for _ in range(n_layers - len(params))]
    return params


def forward_to_level(arch, store, x, level):
    """Features and class distribution at ``level``, computed from the raw input.

    Accepts a single image ``(H, W, C)`` or a batch ``(N, H, W, C)``.
    """
    if not 1 <= level <= arch.T:
        raise ValueError(f"level must be in [1, {arch.T}], got {level}")
    single = np.ndim(x) == 3
    feats = x[None] if single else x
    for i in range(1, level + 1):
        feats = transform(arch, store, feats, i)
    probs = classify(arch, store, feats, level)
    return (feats[0], probs[0]) if single else (feats, probs)


# --------------------------------------------------------------------------
# weight files
# --------------------------------------------------------------------------

MAGIC = b"C2FW"
VERSION = 1
FLAG_F32 = 1


def save_weights(store: WeightStore, path) -> None:
    tensors = list(store.named_tensors())
    f32 = store.dtype == np.float32
    out = [MAGIC, struct.pack("<III", VERSION, len(tensors), FLAG_F32 if f32 else 0)]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4" if f32 else "<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_weights(path, arch: C2FArchitecture | None = None, dtype=None) -> WeightStore:
    """Read a weight file; optionally check it against ``arch`` and widen to ``dtype``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"truncated weight file at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightFormatError("bad magic: not a C2FW weight file (version mismatch)")
    version, count, flags = struct.unpack("<III", take(12))
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    src = np.dtype("<f4") if flags & FLAG_F32 else np.dtype("<f8")
    store = WeightStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(size * src.itemsize), dtype=src).reshape(dims).astype(src.newbyteorder("="))
        tag, i, j, key = name.split("/")
        group = store.alpha if tag == "alpha" else store.beta
        i, j = int(i), int(j)
        while len(group) <= i:
            group.append([])
        while len(group[i]) <= j:
            group[i].append({})
        group[i][j][key] = arr
    if pos != len(buf):
        raise WeightFormatError("trailing bytes after last tensor")
    if arch is not None:
        _check_shapes(arch, store)
        for group, attr in ((store.alpha, "transformer"), (store.beta, "classifier")):
            for lv, params in zip(arch.levels, group):
                params.extend({} for _ in range(len(getattr(lv, attr)) - len(params)))
    if dtype is not None:
        store = store.astype(dtype)
    return store


def _check_shapes(arch, store):
    ref = build_network(arch, seed=0)
    got = {n: a.shape for n, a in store.named_tensors()}
    want = {n: a.shape for n, a in ref.named_tensors()}
    if got != want:
        diff = sorted(set(got.items()) ^ set(want.items()))
        raise WeightFormatError(f"shape table does not match architecture: {diff[:4]}")
    for tag in ("alpha", "beta"):
        if len(getattr(store, tag)) != arch.T:
            raise WeightFormatError(f"{tag} has {len(getattr(store, tag))} levels, architecture has {arch.T}")
