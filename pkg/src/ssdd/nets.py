"""Network definitions: difference-detection net and a small two-headed seg net.

Both networks are built from the explicit-gradient kernels in numkern; each
exposes forward(...) -> (outputs, cache) and backward(cache, ...) -> grads
aligned with parameters().  Confidence-map training never propagates into the
embedding features: backward stops at the feature inputs by construction.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .numkern import (ConvLayer, bilinear_resize, bilinear_resize_backward,
                      conv2d_backward, conv2d_forward, init_conv, one_hot,
                      relu, relu_backward, sigmoid, sigmoid_backward, softmax,
                      softmax_backward)

CKPT_MAGIC = b"SSDDCKPT1"


@dataclass
class FeaturePair:
    """Low/high embedding taps, both resized to the working resolution."""

    e_low: np.ndarray
    e_high: np.ndarray

    def __post_init__(self):
        if self.e_low.shape[1:] != self.e_high.shape[1:]:
            raise ValueError(
                f"feature spatial sizes differ: {self.e_low.shape} vs {self.e_high.shape}")


def _layer_params(layer: ConvLayer):
    return [layer.weights, layer.bias]


class DDNet:
    """Three input branches (mask, low, high), residual trunk, sigmoid head."""

    def __init__(self, rng: np.random.Generator, mask_ch: int, low_ch: int,
                 high_ch: int, width: int = 32, dtype=np.float64):
        trunk = 3 * width
        self.mask_conv = init_conv(rng, mask_ch, width, 3, dtype=dtype)
        self.low_conv = init_conv(rng, low_ch, width, 3, dtype=dtype)
        self.high_conv = init_conv(rng, high_ch, width, 3, dtype=dtype)
        self.res1 = init_conv(rng, trunk, trunk, 3, dtype=dtype)
        self.res2 = init_conv(rng, trunk, trunk, 3, dtype=dtype)
        self.head = init_conv(rng, trunk, 1, 1, dtype=dtype)
        self.width = width

    def layers(self):
        return [self.mask_conv, self.low_conv, self.high_conv,
                self.res1, self.res2, self.head]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in _layer_params(layer)]

    def set_parameters(self, values: list[np.ndarray]) -> None:
        own = self.parameters()
        if len(values) != len(own):
            raise ValueError(f"expected {len(own)} arrays, got {len(values)}")
        for p, v in zip(own, values):
            if p.shape != v.shape:
                raise ValueError(f"parameter shape mismatch: {p.shape} vs {v.shape}")
            p[...] = v.astype(p.dtype)

    def forward(self, feats: FeaturePair, mask_onehot: np.ndarray):
        if mask_onehot.shape[0] != self.mask_conv.in_ch:
            raise ValueError(
                f"mask one-hot has {mask_onehot.shape[0]} channels, "
                f"expected {self.mask_conv.in_ch}")
        if mask_onehot.shape[1:] != feats.e_low.shape[1:]:
            raise ValueError("mask and features must share the working resolution")
        pre_m = conv2d_forward(mask_onehot, self.mask_conv)
        pre_l = conv2d_forward(feats.e_low, self.low_conv)
        pre_h = conv2d_forward(feats.e_high, self.high_conv)
        z0 = np.concatenate([relu(pre_m), relu(pre_l), relu(pre_h)], axis=0)
        pre_r1 = conv2d_forward(z0, self.res1)
        r1 = relu(pre_r1)
        r2 = conv2d_forward(r1, self.res2)
        z1_pre = r2 + z0
        z1 = relu(z1_pre)
        d = sigmoid(conv2d_forward(z1, self.head))[0]
        cache = (mask_onehot, feats, pre_m, pre_l, pre_h, z0, pre_r1, r1,
                 z1_pre, z1, d)
        return d, cache

    def backward(self, cache, grad_d: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for a loss on d; stops at the branch inputs."""
        (mask_onehot, feats, pre_m, pre_l, pre_h, z0, pre_r1, r1,
         z1_pre, z1, d) = cache
        w = self.width
        g_logit = sigmoid_backward(d, grad_d)[None]
        g_z1, gw_head, gb_head = conv2d_backward(z1, self.head, g_logit)
        g_pre = relu_backward(z1_pre, g_z1)
        g_r1, gw_res2, gb_res2 = conv2d_backward(r1, self.res2, g_pre)
        g_pre_r1 = relu_backward(pre_r1, g_r1)
        g_z0, gw_res1, gb_res1 = conv2d_backward(z0, self.res1, g_pre_r1)
        g_z0 = g_z0 + g_pre  # residual skip
        g_m = relu_backward(pre_m, g_z0[:w])
        g_l = relu_backward(pre_l, g_z0[w:2 * w])
        g_h = relu_backward(pre_h, g_z0[2 * w:])
        _, gw_m, gb_m = conv2d_backward(mask_onehot, self.mask_conv, g_m)
        _, gw_l, gb_l = conv2d_backward(feats.e_low, self.low_conv, g_l)
        _, gw_h, gb_h = conv2d_backward(feats.e_high, self.high_conv, g_h)
        return [gw_m, gb_m, gw_l, gb_l, gw_h, gb_h,
                gw_res1, gb_res1, gw_res2, gb_res2, gw_head, gb_head]


def ddnet_forward(net: DDNet, feats: FeaturePair, mask_onehot: np.ndarray) -> np.ndarray:
    """Confidence map in (0,1) for one mask; see DDNet.forward for training."""
    d, _ = net.forward(feats, mask_onehot)
    return d


ENCODER_STRIDES = (1, 2, 1, 2)
DEFAULT_ENCODER_WIDTHS = (16, 24, 32, 48)


class SegNetToy:
    """4-block encoder with low/high taps plus two independent 1x1 heads.

    Heads emit class_count+1 channels, softmax-normalized, then upsampled by 2
    so the output lives at the working resolution (input size / 2).
    """

    def __init__(self, rng: np.random.Generator, class_count: int,
                 widths=DEFAULT_ENCODER_WIDTHS, dtype=np.float64):
        w1, w2, w3, w4 = widths
        self.enc = [
            init_conv(rng, 3, w1, 3, stride=ENCODER_STRIDES[0], dtype=dtype),
            init_conv(rng, w1, w2, 3, stride=ENCODER_STRIDES[1], dtype=dtype),
            init_conv(rng, w2, w3, 3, stride=ENCODER_STRIDES[2], dtype=dtype),
            init_conv(rng, w3, w4, 3, stride=ENCODER_STRIDES[3], dtype=dtype),
        ]
        self.head_main = init_conv(rng, w4, class_count + 1, 1, dtype=dtype)
        self.head_sub = init_conv(rng, w4, class_count + 1, 1, dtype=dtype)
        self.widths = tuple(widths)
        self.class_count = class_count
        self.dtype = dtype

    @property
    def low_ch(self) -> int:
        return self.widths[0]

    @property
    def high_ch(self) -> int:
        return self.widths[3]

    def enc_parameters(self) -> list[np.ndarray]:
        return [p for layer in self.enc for p in _layer_params(layer)]

    def main_parameters(self) -> list[np.ndarray]:
        return _layer_params(self.head_main)

    def sub_parameters(self) -> list[np.ndarray]:
        return _layer_params(self.head_sub)

    def parameters(self) -> list[np.ndarray]:
        return self.enc_parameters() + self.main_parameters() + self.sub_parameters()

    def forward(self, image: np.ndarray):
        """image [H, W, 3] with values in [0, 255]; H and W divisible by 4."""
        h, w = image.shape[:2]
        if h % 4 or w % 4:
            raise ValueError(f"image sides must be divisible by 4, got {h}x{w}")
        x = np.ascontiguousarray(image.transpose(2, 0, 1)).astype(self.dtype) / 255.0
        acts = [x]
        pres = []
        for layer in self.enc:
            pre = conv2d_forward(acts[-1], layer)
            pres.append(pre)
            acts.append(relu(pre))
        wh, ww = h // 2, w // 2
        e_low = bilinear_resize(acts[1], wh, ww)
        e_high = bilinear_resize(acts[4], wh, ww)
        feats = FeaturePair(e_low, e_high)

        heads = {}
        for name, layer in (("main", self.head_main), ("sub", self.head_sub)):
            logits = conv2d_forward(acts[4], layer)
            sm = softmax(logits)
            heads[name] = (sm, bilinear_resize(sm, wh, ww))
        cache = (x, pres, acts, heads)
        return heads["main"][1], heads["sub"][1], feats, cache

    def backward(self, cache, grad_main: np.ndarray | None,
                 grad_sub: np.ndarray | None):
        """Gradients wrt (encoder, main head, sub head) parameters."""
        x, pres, acts, heads = cache
        a4 = acts[4]
        g_a4 = np.zeros_like(a4)
        head_grads = {}
        for name, layer, grad in (("main", self.head_main, grad_main),
                                  ("sub", self.head_sub, grad_sub)):
            if grad is None:
                head_grads[name] = [np.zeros_like(layer.weights),
                                    np.zeros_like(layer.bias)]
                continue
            sm, _ = heads[name]
            g_sm = bilinear_resize_backward(grad, sm.shape[1], sm.shape[2])
            g_logits = softmax_backward(sm, g_sm)
            g_in, gw, gb = conv2d_backward(a4, layer, g_logits)
            g_a4 += g_in
            head_grads[name] = [gw, gb]

        g = g_a4
        enc_grads: list[np.ndarray] = []
        for idx in range(3, -1, -1):
            g = relu_backward(pres[idx], g)
            g, gw, gb = conv2d_backward(acts[idx], self.enc[idx], g)
            enc_grads = [gw, gb] + enc_grads
        return enc_grads, head_grads["main"], head_grads["sub"]


def seg_forward(net: SegNetToy, image: np.ndarray):
    """(p_main, p_sub, feats) at the working resolution for an RGB image."""
    p_main, p_sub, feats, _ = net.forward(image)
    return p_main, p_sub, feats


def make_ddnet(rng: np.random.Generator, net: SegNetToy, width: int = 32,
               dtype=np.float64) -> DDNet:
    """DDNet sized for a segmentation net's feature taps and class count."""
    return DDNet(rng, mask_ch=net.class_count + 1, low_ch=net.low_ch,
                 high_ch=net.high_ch, width=width, dtype=dtype)


def mask_to_onehot(mask: np.ndarray, class_count: int, dtype=np.float64) -> np.ndarray:
    return one_hot(mask, class_count + 1, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint format: CKPT_MAGIC, then per named ParamSet
#   u32 name_len, name, u32 tensor_count,
#   per tensor: u32 rank, rank*u32 dims, little-endian float32 data


def save_checkpoint(path: str, paramsets: dict[str, list[np.ndarray]]) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    for name, tensors in paramsets.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            buf.write(struct.pack("<I", t.ndim))
            for dim in t.shape:
                buf.write(struct.pack("<I", dim))
            buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    _atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str) -> dict[str, list[np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise OSError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise OSError(f"{path}: truncated checkpoint")
        chunk = data[off:off + n]
        off += n
        return chunk

    out: dict[str, list[np.ndarray]] = {}
    while off < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (count,) = struct.unpack("<I", take(4))
        tensors = []
        for _ in range(count):
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
            tensors.append(arr.copy())
        out[name] = tensors
    return out


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
