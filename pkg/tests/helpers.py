"""Shared independent oracles for the test suite."""

import numpy as np


def central_fd(f, x, step=1e-6):
    """Central finite differences of the scalar function f at every coordinate of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def assert_close_rel(got, want, rtol, floor=1e-3):
    denom = np.maximum(np.abs(want), floor)
    worst = np.max(np.abs(got - want) / denom)
    assert worst < rtol, f"worst relative error {worst:.3e} >= {rtol:.0e}"


def rank_auc(scores, labels):
    """AUC of scores against binary labels via the rank-sum statistic."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)
