"""Mask difference detection and confidence-weighted fusion.

Terminology: "knowledge" is the mask fed into a mapping function (CRF or a
retrained model), "advice" is the mapping's output mask.  A trained DDNet
scores each mask with a per-pixel agreement confidence; the fusion keeps the
advice pixel wherever confidence_score is non-negative and falls back to the
knowledge pixel otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import DDNet, FeaturePair, ddnet_forward, mask_to_onehot

FAIL_RATIO = 0.5  # class survival threshold, strict comparison


@dataclass
class BiasParams:
    """Fusion bias: flat term b_dd plus the per-class correction b_class."""

    b_dd: float = 0.4
    b_class: float = 1.0


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {a.shape} != shape {b.shape}")


def difference_mask(mk: np.ndarray, ma: np.ndarray) -> np.ndarray:
    """Binary agreement map: 1 where the masks carry the same label."""
    _check_same_shape(mk, ma, "difference_mask")
    return (mk == ma).astype(np.uint8)


def _class_counts(mask: np.ndarray, classes) -> dict[int, int]:
    return {c: int(np.count_nonzero(mask == c)) for c in classes}


def _ratio_below(mk: np.ndarray, ma: np.ndarray, c: int) -> bool:
    """True when class c kept less than FAIL_RATIO of its knowledge pixels."""
    nk = int(np.count_nonzero(mk == c))
    if nk == 0:
        return False  # absent from knowledge: never counts as failing
    na = int(np.count_nonzero(ma == c))
    return na / nk < FAIL_RATIO


def failing_classes(mk: np.ndarray, ma: np.ndarray, labels) -> frozenset[int]:
    """Image-level classes whose pixel count collapsed from knowledge to advice."""
    return frozenset(c for c in labels if _ratio_below(mk, ma, c))


def exclude_pair(mk: np.ndarray, ma: np.ndarray, labels,
                 quantifier: str = "all") -> bool:
    """Whether a (knowledge, advice) pair is unusable for confidence training.

    With the default "all" quantifier the pair is excluded only when every
    present class collapsed below the survival ratio; "any" excludes as soon
    as one class collapsed.  An empty label set is degenerate and excluded.
    """
    if quantifier not in ("all", "any"):
        raise ValueError(f"unknown quantifier {quantifier!r}")
    if not labels:
        return True
    verdicts = (_ratio_below(mk, ma, c) for c in labels)
    return all(verdicts) if quantifier == "all" else any(verdicts)


def bias_map(mk: np.ndarray, ma: np.ndarray, failing, bp: BiasParams,
             dtype=np.float64) -> np.ndarray:
    """Per-pixel fusion bias.

    Pixels whose knowledge label is a failing class are pushed toward
    knowledge (b_dd - b_class); pixels whose advice label is failing are
    pushed toward advice (b_dd + b_class); a both-sides conflict and the
    default case stay at b_dd.
    """
    _check_same_shape(mk, ma, "bias_map")
    bias = np.full(mk.shape, bp.b_dd, dtype=dtype)
    if failing:
        fail = np.array(sorted(failing), dtype=mk.dtype)
        k_in = np.isin(mk, fail)
        a_in = np.isin(ma, fail)
        bias[k_in & ~a_in] = bp.b_dd - bp.b_class
        bias[a_in & ~k_in] = bp.b_dd + bp.b_class
    return bias


def confidence_score(dk: np.ndarray, da: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Signed advice confidence: knowledge score minus advice score plus bias."""
    _check_same_shape(dk, da, "confidence_score")
    _check_same_shape(dk, bias, "confidence_score")
    return dk - da + bias


def fuse_masks(mk: np.ndarray, ma: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-pixel selection: advice where w >= 0, knowledge elsewhere."""
    _check_same_shape(mk, ma, "fuse_masks")
    _check_same_shape(mk, w, "fuse_masks")
    return np.where(w >= 0, ma, mk)


def ssdd_apply(feats: FeaturePair, mk: np.ndarray, ma: np.ndarray, net: DDNet,
               labels, bp: BiasParams | None = None) -> np.ndarray:
    """Full refinement: score both masks with the DDNet, then fuse."""
    if bp is None:
        bp = BiasParams()
    class_count = net.mask_conv.in_ch - 1
    dtype = feats.e_low.dtype
    dk = ddnet_forward(net, feats, mask_to_onehot(mk, class_count, dtype=dtype))
    da = ddnet_forward(net, feats, mask_to_onehot(ma, class_count, dtype=dtype))
    failing = failing_classes(mk, ma, labels)
    w = confidence_score(dk, da, bias_map(mk, ma, failing, bp, dtype=dtype))
    return fuse_masks(mk, ma, w)
