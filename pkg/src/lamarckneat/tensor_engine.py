"""Minimal CPU kernels: layer forward/backward, softmax cross-entropy, Adam, Glorot init.

Tensors are plain numpy arrays. Image tensors use NHWC layout (batch, height,
width, channels); dense tensors are (batch, features). Kernels preserve the
dtype of their inputs, so training runs in float32 while gradient checks can
run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "maxpool2d", "dropout", "dense", "concat", "flatten")
POOL_SIZE = 2

# cap on the im2col scratch matrix, in elements
_COLS_BUDGET = 1 << 24


class ShapeError(ValueError):
    """Input shapes do not fit a layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: Optional[int] = None
    out_channels: Optional[int] = None
    units: Optional[int] = None
    rate: Optional[float] = None
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel_size is None or self.out_channels is None):
            raise ValueError("conv2d needs kernel_size and out_channels")
        if self.kind == "dense" and self.units is None:
            raise ValueError("dense needs units")
        if self.kind == "dropout" and not (self.rate is not None and 0.0 <= self.rate < 1.0):
            raise ValueError("dropout needs a rate in [0, 1)")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d k={self.kernel_size} f={self.out_channels}"
        if self.kind == "maxpool2d":
            return f"maxpool2d {POOL_SIZE}x{POOL_SIZE}"
        if self.kind == "dropout":
            return f"dropout p={self.rate:.3g}"
        if self.kind == "dense":
            return f"dense u={self.units} {self.activation}"
        return self.kind


def same_padding(kernel_size: int) -> tuple[int, int]:
    """(before, after) padding for stride-1 SAME; the extra pixel goes after."""
    total = kernel_size - 1
    return total // 2, total - total // 2


def pooled_size(n: int) -> int:
    return -(-n // POOL_SIZE)


def output_shape(spec: LayerSpec, input_shapes: Sequence[tuple]) -> tuple:
    """Per-sample output shape (no batch axis) for the given per-sample input shapes."""
    kind = spec.kind
    if kind == "concat":
        if not input_shapes:
            raise ShapeError("concat", "no inputs")
        if any(len(s) != 3 for s in input_shapes):
            raise ShapeError("concat", f"non-spatial input among {list(input_shapes)}")
        h = min(s[0] for s in input_shapes)
        w = min(s[1] for s in input_shapes)
        return (h, w, sum(s[2] for s in input_shapes))
    if len(input_shapes) != 1:
        raise ShapeError(kind, f"expects one input, got {len(input_shapes)}")
    shape = tuple(input_shapes[0])
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(kind, f"expects HxWxC input, got {shape}")
        return (shape[0], shape[1], spec.out_channels)
    if kind == "maxpool2d":
        if len(shape) != 3:
            raise ShapeError(kind, f"expects HxWxC input, got {shape}")
        return (pooled_size(shape[0]), pooled_size(shape[1]), shape[2])
    if kind == "dropout":
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(kind, f"expects a vector input, got {shape}")
        return (spec.units,)
    raise ShapeError(kind, "unhandled kind")


def param_shapes(spec: LayerSpec, input_shape: tuple) -> list[tuple]:
    if spec.kind == "conv2d":
        k = spec.kernel_size
        return [(k, k, input_shape[-1], spec.out_channels), (spec.out_channels,)]
    if spec.kind == "dense":
        return [(input_shape[0], spec.units), (spec.units,)]
    return []


# -- convolution helpers ----------------------------------------------------

def _correlate(xpad: np.ndarray, wmat: np.ndarray, k: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Valid cross-correlation of a pre-padded NHWC batch with a (C*k*k, F) kernel matrix."""
    n, _, _, c = xpad.shape
    h, w = out_hw
    f = wmat.shape[1]
    out = np.empty((n, h, w, f), dtype=np.result_type(xpad, wmat))
    step = max(1, _COLS_BUDGET // max(1, h * w * k * k * c))
    for s in range(0, n, step):
        cols = _im2col(xpad[s:s + step], k)
        out[s:s + step] = (cols @ wmat).reshape(-1, h, w, f)
    return out


def _im2col(xpad: np.ndarray, k: int) -> np.ndarray:
    # rows are output pixels, columns ordered (ky, kx, c)
    c = xpad.shape[-1]
    win = sliding_window_view(xpad, (k, k), axis=(1, 2))  # b,h,w,c,ky,kx
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * c)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    k, _, c, f = weight.shape
    return weight.reshape(k * k * c, f)


def _conv_weight_grad(xpad: np.ndarray, grad: np.ndarray, k: int) -> np.ndarray:
    n, h, w, f = grad.shape
    c = xpad.shape[-1]
    acc = np.zeros((c * k * k, f), dtype=np.result_type(xpad, grad))
    step = max(1, _COLS_BUDGET // max(1, h * w * k * k * c))
    for s in range(0, n, step):
        cols = _im2col(xpad[s:s + step], k)
        acc += cols.T @ grad[s:s + step].reshape(-1, f)
    return acc.reshape(k, k, c, f)


def _conv_forward(x, weight, bias, spec):
    k = spec.kernel_size
    before, after = same_padding(k)
    xpad = np.pad(x, ((0, 0), (before, after), (before, after), (0, 0)))
    z = _correlate(xpad, _kernel_matrix(weight), k, x.shape[1:3])
    z += bias
    if spec.activation == "relu":
        np.maximum(z, 0, out=z)
    return z, {"xpad": xpad, "out": z, "weight": weight}


def _conv_backward(cache, grad, spec, input_grad=True):
    k = spec.kernel_size
    weight = cache["weight"]
    if spec.activation == "relu":
        grad = grad * (cache["out"] > 0)
    grad_w = _conv_weight_grad(cache["xpad"], grad, k)
    grad_b = grad.sum(axis=(0, 1, 2))
    if not input_grad:
        return [None], [grad_w, grad_b]
    before, after = same_padding(k)
    # input gradient is a correlation of the output gradient with the flipped,
    # channel-transposed kernel; padding sides swap
    gpad = np.pad(grad, ((0, 0), (after, before), (after, before), (0, 0)))
    flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2)
    h, w = grad.shape[1:3]
    grad_x = _correlate(gpad, _kernel_matrix(flipped), k, (h, w))
    return [grad_x], [grad_w, grad_b]


# -- pooling ----------------------------------------------------------------

def _pool_forward(x):
    n, h, w, c = x.shape
    ho, wo = pooled_size(h), pooled_size(w)
    ph, pw = ho * POOL_SIZE - h, wo * POOL_SIZE - w
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    windows = x.reshape(n, ho, POOL_SIZE, wo, POOL_SIZE, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, ho, wo, c, POOL_SIZE * POOL_SIZE)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, {"arg": arg, "in_hw": (h, w)}


def _pool_backward(cache, grad):
    arg = cache["arg"]
    h, w = cache["in_hw"]
    n, ho, wo, c = grad.shape
    onehot = np.zeros((n, ho, wo, c, POOL_SIZE * POOL_SIZE), dtype=grad.dtype)
    np.put_along_axis(onehot, arg[..., None], grad[..., None], axis=-1)
    gx = onehot.reshape(n, ho, wo, c, POOL_SIZE, POOL_SIZE).transpose(0, 1, 4, 2, 5, 3)
    gx = gx.reshape(n, ho * POOL_SIZE, wo * POOL_SIZE, c)
    return [np.ascontiguousarray(gx[:, :h, :w, :])], []


# -- public kernels -----------------------------------------------------------

def forward_layer(spec: LayerSpec, inputs: Sequence[np.ndarray], params: Sequence[np.ndarray] = (),
                  mode: str = "train", rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, Any]:
    """Run one layer on a batch.

    ``inputs`` holds one batched tensor (several for ``concat``); ``params`` is
    ``[weight, bias]`` for conv2d and dense, empty otherwise. Returns the
    output and an opaque cache for :func:`backward_layer`.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    per_sample = [tuple(x.shape[1:]) for x in inputs]
    output_shape(spec, per_sample)  # raises ShapeError on mismatch
    if spec.kind in ("conv2d", "dense"):
        expected = param_shapes(spec, per_sample[0])
        got = [tuple(p.shape) for p in params]
        if got != expected:
            raise ShapeError(spec.kind, f"parameter shapes {got} do not match expected {expected}")
    kind = spec.kind
    cache: dict = {"kind": kind}

    if kind == "conv2d":
        out, c = _conv_forward(inputs[0], params[0], params[1], spec)
        cache.update(c)
    elif kind == "dense":
        x = inputs[0]
        out = x @ params[0] + params[1]
        if spec.activation == "relu":
            np.maximum(out, 0, out=out)
        cache.update(x=x, out=out, weight=params[0])
    elif kind == "maxpool2d":
        out, c = _pool_forward(inputs[0])
        cache.update(c)
    elif kind == "dropout":
        x = inputs[0]
        if mode == "train" and spec.rate > 0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = 1.0 - spec.rate
            mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
            out = x * mask
            cache["mask"] = mask
        else:
            out = x
            cache["mask"] = None
    elif kind == "flatten":
        x = inputs[0]
        out = x.reshape(x.shape[0], -1)
        cache["in_shape"] = x.shape
    else:  # concat
        h = min(x.shape[1] for x in inputs)
        w = min(x.shape[2] for x in inputs)
        out = np.concatenate([x[:, :h, :w, :] for x in inputs], axis=-1)
        cache["in_shapes"] = [x.shape for x in inputs]
    return out, cache


def backward_layer(spec: LayerSpec, cache: Any, grad_output: np.ndarray,
                   input_grad: bool = True) -> tuple[list, list]:
    """Gradients w.r.t. the layer inputs and parameters, given d(loss)/d(output).

    With ``input_grad=False`` the input gradients come back as ``None``, which
    saves the transposed correlation on a network's first layer.
    """
    if not isinstance(cache, dict) or cache.get("kind") != spec.kind:
        raise ValueError(f"cache does not belong to a {spec.kind} layer")
    kind = spec.kind
    g = grad_output
    if kind == "conv2d":
        return _conv_backward(cache, g, spec, input_grad)
    if kind == "dense":
        if spec.activation == "relu":
            g = g * (cache["out"] > 0)
        gx = g @ cache["weight"].T if input_grad else None
        return [gx], [cache["x"].T @ g, g.sum(axis=0)]
    if kind == "maxpool2d":
        return _pool_backward(cache, g)
    if kind == "dropout":
        mask = cache["mask"]
        return [g if mask is None else g * mask], []
    if kind == "flatten":
        return [g.reshape(cache["in_shape"])], []
    grads = []
    offset = 0
    for shape in cache["in_shapes"]:
        c = shape[-1]
        part = np.zeros(shape, dtype=g.dtype)
        part[:, :g.shape[1], :g.shape[2], :] = g[..., offset:offset + c]
        grads.append(part)
        offset += c
    return grads, []


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> tuple[np.ndarray, AdamState]:
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise ShapeError("adam", f"params {params.shape}, grads {grads.shape}, "
                                 f"moments {state.first_moment.shape}")
    b1, b2 = betas
    t = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * grads
    v = b2 * state.second_moment + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype, copy=False)
    return new.astype(params.dtype, copy=False), AdamState(m, v, t)


def glorot_init(fan_in: int, fan_out: int, shape, rng: np.random.Generator,
                dtype=np.float32) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fan_in and fan_out must be positive")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec: LayerSpec, input_shape: tuple, rng: np.random.Generator,
                dtype=np.float32) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases for conv2d/dense; [] for the rest."""
    if spec.kind == "conv2d":
        k = spec.kernel_size
        c = input_shape[-1]
        w = glorot_init(k * k * c, k * k * spec.out_channels, (k, k, c, spec.out_channels), rng, dtype)
        return [w, np.zeros(spec.out_channels, dtype=dtype)]
    if spec.kind == "dense":
        w = glorot_init(input_shape[0], spec.units, (input_shape[0], spec.units), rng, dtype)
        return [w, np.zeros(spec.units, dtype=dtype)]
    return []
