"""Dense layer math for the cascade networks.

Every array is batch-first and channel-last: images are ``(N, H, W, C)``,
flat features are ``(N, D)``.  A single example is a batch of one.  Layers
are described by :class:`LayerSpec` and carry their parameters in a plain
``dict`` of arrays so they can be serialized by name.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("conv3x3", "maxpool2x2", "relu", "dense", "flatten", "softmax", "batchnorm")

PROB_EPS = 1e-12
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Input does not match the shape a layer expects."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    in_dim: int = 0
    out_dim: int = 0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv3x3(cin, cout, name=""):
    return LayerSpec("conv3x3", in_channels=cin, out_channels=cout, name=name)


def dense(din, dout, name=""):
    return LayerSpec("dense", in_dim=din, out_dim=dout, name=name)


def batchnorm(channels, name=""):
    return LayerSpec("batchnorm", in_channels=channels, out_channels=channels, name=name)


def simple(kind, name=""):
    return LayerSpec(kind, name=name)


@dataclass
class LayerGrads:
    grad_input: np.ndarray
    grad_params: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# shape rules
# --------------------------------------------------------------------------

def output_shape(layer: LayerSpec, shape: tuple) -> tuple:
    """Shape (without the batch axis) produced by ``layer`` on ``shape``."""
    shape = tuple(shape)
    k = layer.kind
    if k == "conv3x3":
        if len(shape) != 3 or shape[2] != layer.in_channels:
            raise ShapeError(f"conv3x3 expects (H, W, {layer.in_channels}), got {shape}")
        return shape[0], shape[1], layer.out_channels
    if k == "maxpool2x2":
        if len(shape) != 3:
            raise ShapeError(f"maxpool2x2 expects (H, W, C), got {shape}")
        if shape[0] % 2 or shape[1] % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial dims, got {shape[0]}x{shape[1]}")
        return shape[0] // 2, shape[1] // 2, shape[2]
    if k == "dense":
        if shape != (layer.in_dim,):
            raise ShapeError(f"dense expects ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "batchnorm":
        if shape[-1] != layer.in_channels:
            raise ShapeError(f"batchnorm expects {layer.in_channels} channels, got {shape}")
        return shape
    if k == "softmax":
        if len(shape) != 1:
            raise ShapeError(f"softmax expects a flat vector, got {shape}")
        return shape
    return shape  # relu


def init_params(layer: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Fan-in scaled uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero bias."""
    if layer.kind == "conv3x3":
        fan_in = 9 * layer.in_channels
        lim = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-lim, lim, size=(3, 3, layer.in_channels, layer.out_channels))
        return {"w": w.astype(dtype), "b": np.zeros(layer.out_channels, dtype=dtype)}
    if layer.kind == "dense":
        lim = np.sqrt(6.0 / layer.in_dim)
        w = rng.uniform(-lim, lim, size=(layer.in_dim, layer.out_dim))
        return {"w": w.astype(dtype), "b": np.zeros(layer.out_dim, dtype=dtype)}
    if layer.kind == "batchnorm":
        c = layer.in_channels
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "mean": np.zeros(c, dtype=dtype),
            "var": np.ones(c, dtype=dtype),
        }
    return {}


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def _patches(x):
    """(N, H, W, C) -> (N, H, W, 3, 3, C) same-padded 3x3 neighbourhoods."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_batch(layer, x):
    if x.ndim < 2:
        raise ShapeError(f"{layer.kind}: expected a batch, got array of shape {x.shape}")
    output_shape(layer, x.shape[1:])


def forward(layer: LayerSpec, params: dict, x: np.ndarray) -> np.ndarray:
    _check_batch(layer, x)
    k = layer.kind
    if k == "conv3x3":
        n, h, w, c = x.shape
        cols = _patches(x).reshape(n * h * w, 9 * c)
        out = cols @ params["w"].reshape(9 * c, -1) + params["b"]
        return out.reshape(n, h, w, -1)
    if k == "maxpool2x2":
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
    if k == "relu":
        return np.maximum(x, 0)
    if k == "dense":
        return x @ params["w"] + params["b"]
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    if k == "softmax":
        return softmax(x)
    # batchnorm, frozen statistics
    scale = params["gamma"] / np.sqrt(params["var"] + BN_EPS)
    return (x - params["mean"]) * scale + params["beta"]


def backward(layer: LayerSpec, params: dict, x: np.ndarray, grad_out: np.ndarray,
             out: np.ndarray | None = None) -> LayerGrads:
    """Gradients of a layer given its forward input ``x`` and upstream gradient.

    ``out`` is the cached forward output; maxpool and softmax recompute it if
    omitted.  Parameter gradients are summed over the batch.
    """
    expected = (x.shape[0],) + output_shape(layer, x.shape[1:])
    if grad_out.shape != expected:
        raise ShapeError(f"{layer.kind} backward: grad_output shape {grad_out.shape}, expected {expected}")
    k = layer.kind
    if k == "conv3x3":
        n, h, w, c = x.shape
        cout = layer.out_channels
        g2 = grad_out.reshape(n * h * w, cout)
        cols = _patches(x).reshape(n * h * w, 9 * c)
        gw = (cols.T @ g2).reshape(3, 3, c, cout)
        gb = g2.sum(axis=0)
        # input gradient: correlate the padded upstream gradient with the flipped kernel
        wflip = params["w"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, c)
        gcols = _patches(grad_out).reshape(n * h * w, 9 * cout)
        gx = (gcols @ wflip).reshape(n, h, w, c)
        return LayerGrads(gx, {"w": gw, "b": gb})
    if k == "maxpool2x2":
        n, h, w, c = x.shape
        if out is None:
            out = forward(layer, params, x)
        win = x.reshape(n, h // 2, 2, w // 2, 2, c)
        mask = win == out[:, :, None, :, None, :]
        # route to the first maximal element of each window only
        flat = mask.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        first = np.zeros_like(flat)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(first, idx[..., None], True, axis=-1)
        first = first.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        gx = first * grad_out[:, :, None, :, None, :]
        return LayerGrads(gx.reshape(x.shape))
    if k == "relu":
        return LayerGrads(grad_out * (x > 0))
    if k == "dense":
        return LayerGrads(grad_out @ params["w"].T,
                          {"w": x.T @ grad_out, "b": grad_out.sum(axis=0)})
    if k == "flatten":
        return LayerGrads(grad_out.reshape(x.shape))
    if k == "softmax":
        p = softmax(x) if out is None else out
        dot = (grad_out * p).sum(axis=-1, keepdims=True)
        return LayerGrads(p * (grad_out - dot))
    scale = params["gamma"] / np.sqrt(params["var"] + BN_EPS)
    xhat = (x - params["mean"]) / np.sqrt(params["var"] + BN_EPS)
    axes = tuple(range(x.ndim - 1))
    return LayerGrads(grad_out * scale, {"gamma": (grad_out * xhat).sum(axis=axes),
                                         "beta": grad_out.sum(axis=axes)})


def cross_entropy(probs, labels):
    """Mean cross-entropy of a batch and its gradient w.r.t. the logits.

    Returns ``(loss, grad_logits, clamped)``; ``clamped`` reports whether any
    probability hit the ``1e-12`` floor before the log.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    n = probs.shape[0]
    p_true = probs[np.arange(n), labels]
    clamped = bool((p_true < PROB_EPS).any())
    loss = float(-np.log(np.maximum(p_true, PROB_EPS)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n, clamped


# --------------------------------------------------------------------------
# stacks and gradient checking
# --------------------------------------------------------------------------

def stack_forward(layers, params, x, keep=False):
    """Run a layer list.  With ``keep`` also return every intermediate input."""
    acts = [x]
    for layer, p in zip(layers, params):
        x = forward(layer, p, x)
        acts.append(x)
    return (x, acts) if keep else x


def stack_backward(layers, params, acts, grad, skip_last_softmax=True, need_input_grad=False):
    """Backprop through a stack whose forward activations are ``acts``.

    When the stack ends in softmax and ``skip_last_softmax`` is set, ``grad``
    is taken to be the gradient w.r.t. the logits (softmax + cross-entropy
    fused).  Returns (per-layer param grads, grad w.r.t. the stack input).
    """
    grads = [dict() for _ in layers]
    last = len(layers) - 1
    if skip_last_softmax and layers and layers[-1].kind == "softmax":
        last -= 1
    for i in range(last, -1, -1):
        if i == 0 and not need_input_grad and layers[0].kind in ("conv3x3", "dense"):
            grads[0] = _param_grads_only(layers[0], acts[0], grad)
            grad = None
            break
        g = backward(layers[i], params[i], acts[i], grad, acts[i + 1])
        grads[i] = g.grad_params
        grad = g.grad_input
    return grads, grad


def _param_grads_only(layer, x, grad_out):
    if layer.kind == "dense":
        return {"w": x.T @ grad_out, "b": grad_out.sum(axis=0)}
    n, h, w, c = x.shape
    g2 = grad_out.reshape(n * h * w, -1)
    cols = _patches(x).reshape(n * h * w, 9 * c)
    return {"w": (cols.T @ g2).reshape(3, 3, c, -1), "b": g2.sum(axis=0)}


def stack_loss(layers, params, x, labels):
    probs = stack_forward(layers, params, x)
    return cross_entropy(probs, labels)[0]


def grad_check(layers, params, x, labels, step=1e-6, check_input=True):
    """Max relative error between backprop and central differences.

    The stack must end in softmax; the loss is mean cross-entropy.  Relative
    error is ``|a - n| / max(|a|, |n|, 1e-10)`` over every parameter entry
    (and input entry when ``check_input``).
    """
    if not 1e-7 <= step <= 1e-5:
        raise ValueError("step must lie in [1e-7, 1e-5]")
    x = np.asarray(x, dtype=np.float64)
    params = [{k: np.array(v, dtype=np.float64) for k, v in p.items()} for p in params]
    probs, acts = stack_forward(layers, params, x, keep=True)
    _, g, _ = cross_entropy(probs, labels)
    pgrads, gx = stack_backward(layers, params, acts, g, need_input_grad=True)

    worst = 0.0

    def compare(arr, analytic):
        nonlocal worst
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            up = stack_loss(layers, params, x, labels)
            arr[i] = orig - step
            down = stack_loss(layers, params, x, labels)
            arr[i] = orig
            num = (up - down) / (2 * step)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-10)
            worst = max(worst, err)

    for p, gp in zip(params, pgrads):
        for name in gp:
            compare(p[name], gp[name])
    if check_input:
        compare(x, gx)
    return worst
