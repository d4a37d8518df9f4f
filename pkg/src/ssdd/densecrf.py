"""Fully-connected CRF with Gaussian + bilateral pairwise potentials.

Mean-field inference with a Potts compatibility. The dense O(N^2)
message-passing path is the normative definition; a truncated spatial window
is available behind a flag for speed and is only a faithful approximation
when every kernel length scale fits inside the window (radius defaults to
3 * theta_gamma, so the position-color term must be negligible beyond that
distance, e.g. on high-contrast images or for small theta_alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNARY_EPS = 1e-7
NORM_TOL = 1e-6


@dataclass
class CrfParams:
    w_g: float = 3.0
    w_rgb: float = 10.0
    theta_alpha: float = 80.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel length scales must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be a positive integer")


def pairwise_potential(i, j, img: np.ndarray, params: CrfParams) -> float:
    """Kernel value between pixels i=(y,x) and j=(y,x) of an RGB image."""
    dy = float(i[0] - j[0])
    dx = float(i[1] - j[1])
    d2 = dy * dy + dx * dx
    ci = img[i[0], i[1]].astype(np.float64)
    cj = img[j[0], j[1]].astype(np.float64)
    c2 = float(np.sum((ci - cj) ** 2))
    appearance = params.w_g * math.exp(
        -d2 / (2.0 * params.theta_alpha ** 2) - c2 / (2.0 * params.theta_beta ** 2))
    smoothness = params.w_rgb * math.exp(-d2 / (2.0 * params.theta_gamma ** 2))
    return appearance + smoothness


def kernel_matrix(img: np.ndarray, params: CrfParams) -> np.ndarray:
    """Dense [N, N] pairwise kernel with a zero diagonal (no self messages)."""
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    col = img.reshape(-1, 3).astype(np.float64)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    c2 = ((col[:, None, :] - col[None, :, :]) ** 2).sum(axis=2)
    k = (params.w_g * np.exp(-d2 / (2.0 * params.theta_alpha ** 2)
                             - c2 / (2.0 * params.theta_beta ** 2))
         + params.w_rgb * np.exp(-d2 / (2.0 * params.theta_gamma ** 2)))
    np.fill_diagonal(k, 0.0)
    return k


def _check_inputs(p: np.ndarray, img: np.ndarray) -> None:
    if p.ndim != 3:
        raise ValueError(f"probability map must be [C, H, W], got shape {p.shape}")
    if img.shape[:2] != p.shape[1:] or img.shape[2] != 3:
        raise ValueError(
            f"image shape {img.shape} does not match probability map {p.shape}")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=0) - 1.0)) > NORM_TOL:
        raise ValueError("probability map is not normalized per pixel")


def _potts_update(q: np.ndarray, u: np.ndarray, messages: np.ndarray) -> np.ndarray:
    """One mean-field step: Q_i(l) proportional to exp(-u_i(l) - sum_{l' != l} m_i(l'))."""
    penalty = messages.sum(axis=1, keepdims=True) - messages
    logits = -u - penalty
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def crf_refine(p: np.ndarray, img: np.ndarray, params: CrfParams | None = None,
               windowed: bool = False) -> np.ndarray:
    """Mean-field refinement of the per-pixel distribution p [C, H, W]."""
    if params is None:
        params = CrfParams()
    _check_inputs(p, img)
    c, h, w = p.shape
    u = -np.log(np.maximum(p, UNARY_EPS)).reshape(c, -1).T  # [N, C]
    q = p.reshape(c, -1).T.astype(np.float64).copy()

    if windowed:
        offsets = _window_offsets(img, params)
        for _ in range(params.iterations):
            q = _potts_update(q, u, _windowed_messages(q, offsets, h, w))
        return q.T.reshape(c, h, w)

    k = kernel_matrix(img, params)
    for _ in range(params.iterations):
        q = _potts_update(q, u, k @ q)
    return q.T.reshape(c, h, w)


def _window_offsets(img: np.ndarray, params: CrfParams):
    """Per-offset kernel slabs for displacements within radius 3*theta_gamma."""
    radius = int(math.ceil(3.0 * params.theta_gamma))
    h, w = img.shape[:2]
    col = img.astype(np.float64)
    offsets = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            d2 = dy * dy + dx * dx
            if d2 > radius * radius:
                continue
            # region of pixels i whose neighbor i+(dy,dx) is inside the image
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            diff = col[y0:y1, x0:x1] - col[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            c2 = (diff ** 2).sum(axis=2)
            kv = (params.w_g * np.exp(-d2 / (2.0 * params.theta_alpha ** 2)
                                      - c2 / (2.0 * params.theta_beta ** 2))
                  + params.w_rgb * math.exp(-d2 / (2.0 * params.theta_gamma ** 2)))
            offsets.append((dy, dx, y0, y1, x0, x1, kv))
    return offsets


def _windowed_messages(q: np.ndarray, offsets, h: int, w: int) -> np.ndarray:
    c = q.shape[1]
    qs = q.T.reshape(c, h, w)
    msg = np.zeros((c, h, w))
    for dy, dx, y0, y1, x0, x1, kv in offsets:
        msg[:, y0:y1, x0:x1] += kv * qs[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return msg.reshape(c, -1).T
