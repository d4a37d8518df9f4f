"""Dense-tensor numerical kernel: convolution, activations, losses, resizing, SGD.

Tensors are plain numpy arrays in row-major layout, channel-first for feature
maps ([C, H, W]).  Every differentiable operation comes with an explicit
backward function; there is no graph autodiff.  Loss reductions accumulate in
64-bit regardless of the working dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

EPS = 1e-7  # log-guard used by both losses


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvLayer:
    """2-D convolution parameters: weights [out_ch, in_ch, kh, kw], bias [out_ch]."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        out_ch, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel sides must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ValueError(f"bias shape {self.bias.shape} does not match out_ch={out_ch}")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weights.shape[2:]
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3,
              stride: int = 1, padding: int | None = None,
              dtype=np.float64) -> ConvLayer:
    """Fresh ConvLayer with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights."""
    fan_in = in_ch * k * k
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(out_ch,)).astype(dtype)
    if padding is None:
        padding = k // 2
    return ConvLayer(w, b, stride=stride, padding=padding)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return (cols [C*kh*kw, OH*OW], OH, OW) for input x [C, H, W]."""
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [C, OH, OW, kh, kw]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Cross-correlation of x [C_in, H, W] with layer weights -> [C_out, OH, OW]."""
    if x.ndim != 3 or x.shape[0] != layer.in_ch:
        raise ValueError(
            f"conv input shape {x.shape} does not match in_ch={layer.in_ch}")
    kh, kw = layer.weights.shape[2:]
    cols, oh, ow = _im2col(x, kh, kw, layer.stride, layer.padding)
    w_mat = layer.weights.reshape(layer.out_ch, -1)
    out = w_mat @ cols + layer.bias[:, None]
    return out.reshape(layer.out_ch, oh, ow)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of a scalar loss wrt (input, weights, bias) given grad_out."""
    if x.ndim != 3 or x.shape[0] != layer.in_ch:
        raise ValueError(
            f"conv input shape {x.shape} does not match in_ch={layer.in_ch}")
    kh, kw = layer.weights.shape[2:]
    oh, ow = layer.out_size(x.shape[1], x.shape[2])
    if grad_out.shape != (layer.out_ch, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != expected {(layer.out_ch, oh, ow)}")
    cols, _, _ = _im2col(x, kh, kw, layer.stride, layer.padding)
    g = grad_out.reshape(layer.out_ch, -1)

    grad_bias = g.sum(axis=1)
    grad_weights = (g @ cols.T).reshape(layer.weights.shape)

    # scatter the column gradient back onto the (padded) input
    grad_cols = layer.weights.reshape(layer.out_ch, -1).T @ g
    grad_cols = grad_cols.reshape(x.shape[0], kh, kw, oh, ow)
    c, h, w = x.shape
    p, s = layer.padding, layer.stride
    grad_pad = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            grad_pad[:, ki:ki + s * oh:s, kj:kj + s * ow:s] += grad_cols[:, ki, kj]
    grad_input = grad_pad[:, p:p + h, p:p + w] if p else grad_pad
    return grad_input, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluated branch-wise to stay overflow-free for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward from the forward *output* y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis (axis 0) of [C, ...]."""
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward from the forward output y = softmax(x)."""
    dot = (grad_out * y).sum(axis=0, keepdims=True)
    return y * (grad_out - dot)


# ---------------------------------------------------------------------------
# losses


def bce(m: np.ndarray, d: np.ndarray):
    """Mean binary cross entropy of prediction d against binary target m.

    Returns (loss, grad_d).  d is clamped into [EPS, 1-EPS]; the gradient is
    zero where the clamp is active.
    """
    if m.shape != d.shape:
        raise ValueError(f"target shape {m.shape} != prediction shape {d.shape}")
    dc = np.clip(d, EPS, 1.0 - EPS)
    n = d.size
    loss = -float(np.sum(m * np.log(dc) + (1.0 - m) * np.log(1.0 - dc),
                         dtype=np.float64)) / n
    grad = -(m / dc - (1.0 - m) / (1.0 - dc)) / n
    grad = np.where((d > EPS) & (d < 1.0 - EPS), grad, 0.0).astype(d.dtype)
    return loss, grad


def cross_entropy_seg(h: np.ndarray, m: np.ndarray, ignore_label: int = 255):
    """Pixelwise CE of probability map h [C, H, W] against label mask m [H, W].

    Averages -log h[m_u] over non-ignored pixels; all-ignored input yields
    loss 0 with a zero gradient.
    """
    c = h.shape[0]
    if m.shape != h.shape[1:]:
        raise ValueError(f"mask shape {m.shape} != map spatial shape {h.shape[1:]}")
    valid = m != ignore_label
    n = int(valid.sum())
    grad = np.zeros_like(h)
    if n == 0:
        return 0.0, grad
    if np.any((m >= c) & valid):
        raise ValueError(f"mask contains labels >= {c} that are not the ignore label")
    ys, xs = np.nonzero(valid)
    labels = m[ys, xs].astype(np.intp)
    picked = h[labels, ys, xs]
    pc = np.maximum(picked, EPS)
    loss = -float(np.sum(np.log(pc), dtype=np.float64)) / n
    g = np.where(picked > EPS, -1.0 / (pc * n), 0.0)
    grad[labels, ys, xs] = g
    return loss, grad


# ---------------------------------------------------------------------------
# resizing


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] corner-aligned linear interpolation matrix (float64)."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    if n_out == 1:
        a[0, 0] = 1.0
        return a
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        src = i * scale
        lo = min(int(math.floor(src)), n_in - 2)
        frac = src - lo
        a[i, lo] = 1.0 - frac
        a[i, lo + 1] = frac
    return a


def bilinear_resize(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable corner-aligned linear resize of t [C, H, W] -> [C, out_h, out_w]."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = t.shape
    ah = _interp_matrix(h, out_h).astype(t.dtype)
    aw = np.ascontiguousarray(_interp_matrix(w, out_w).astype(t.dtype).T)
    return ah @ (t @ aw)


def bilinear_resize_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of bilinear_resize: grad wrt the [C, in_h, in_w] input."""
    _, oh, ow = grad_out.shape
    ah = np.ascontiguousarray(_interp_matrix(in_h, oh).astype(grad_out.dtype).T)
    aw = _interp_matrix(in_w, ow).astype(grad_out.dtype)
    return ah @ (grad_out @ aw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Schedule:
    """Cosine ramp-down from base_lr at step 0 to 0 at total_steps."""

    base_lr: float
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be a positive integer")

    def lr(self, step: int) -> float:
        if step > self.total_steps:
            raise ValueError(f"step {step} exceeds total_steps {self.total_steps}")
        return self.base_lr * 0.5 * (1.0 + _cospi(step / self.total_steps))


def _cospi(x: float) -> float:
    """cos(pi*x), exact at quarter phases so schedule endpoints are exact."""
    r = math.fmod(x, 2.0)
    if r in (0.5, 1.5):
        return 0.0
    if r == 1.0:
        return -1.0
    if r == 0.0:
        return 1.0
    return math.cos(math.pi * r)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray],
             schedule: Schedule, step: int) -> None:
    """In-place plain SGD update: p <- p - lr(step) * g."""
    if len(params) != len(grads):
        raise ValueError("params and grads must have equal length")
    lr = schedule.lr(step)
    for p, g in zip(params, grads):
        p -= (lr * g).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# small helpers shared by the networks and the refinement ops


def one_hot(mask: np.ndarray, channels: int, dtype=np.float64) -> np.ndarray:
    """Label mask [H, W] -> one-hot tensor [channels, H, W]."""
    if mask.min() < 0 or mask.max() >= channels:
        raise ValueError(f"mask values outside [0, {channels})")
    out = np.zeros((channels,) + mask.shape, dtype=dtype)
    h, w = mask.shape
    out[mask.reshape(-1), np.repeat(np.arange(h), w), np.tile(np.arange(w), h)] = 1.0
    return out
