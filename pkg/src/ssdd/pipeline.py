"""Two-stage refinement: static seed refinement, then in-training refinement.

Stage 1 trains the base segmentation branch on the raw seed masks while a
difference-detection net learns where the CRF changes them; the trained net
then fuses each (seed, CRF) mask pair into a refined seed.  Stage 2 re-trains
a segmentation model whose pseudo-labels are regenerated every step by two
fresh difference-detection nets (net 1 fuses the model's own mask with its
CRF; net 2 fuses the stage-1 seed with that result), with an auxiliary head
trained on a mix of the two mask generations to keep the loop out of
degenerate minima.  Confidence losses never update the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkern as nk
from .benchdata import SampleRecord
from .core import (BiasParams, bias_map, confidence_score, difference_mask,
                   exclude_pair, failing_classes, fuse_masks)
from .densecrf import CrfParams, crf_refine
from .nets import (DDNet, SegNetToy, make_ddnet, mask_to_onehot)

DESK_BATCH_SIZE = 8  # default used by the command-line tools


@dataclass
class StaticStageConfig:
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 0.1    # from-scratch desk-scale nets need far more than 1e-3
    bias: BiasParams = field(default_factory=BiasParams)
    crf: CrfParams = field(default_factory=CrfParams)
    crf_windowed: bool = True
    crf_full_res: bool = True       # advice computed at image resolution
    exclude_quantifier: str = "all"
    flip_augment: bool = True
    dd_width: int = 32
    seed: int = 0
    dtype: str = "float32"


@dataclass
class DynamicStageConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-3
    alpha: float = 0.5
    bias: BiasParams = field(default_factory=BiasParams)
    crf: CrfParams = field(default_factory=CrfParams)
    crf_windowed: bool = True
    exclude_quantifier: str = "all"
    flip_augment: bool = True
    dd_width: int = 32
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def present_label_argmax(p: np.ndarray, labels) -> np.ndarray:
    """Argmax restricted to background plus the image's present classes.

    Ties break toward the smaller class index; background is index 0.
    """
    allowed = np.array([0] + sorted(int(c) for c in labels), dtype=np.int64)
    if allowed.size == 1:
        return np.zeros(p.shape[1:], dtype=np.uint8)
    sub = p[allowed]
    return allowed[np.argmax(sub, axis=0)].astype(np.uint8)


def upsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)


def downsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    return np.ascontiguousarray(mask[::factor, ::factor])


def _resize_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    chw = image.transpose(2, 0, 1).astype(np.float64)
    return nk.bilinear_resize(chw, h, w).transpose(1, 2, 0)


@dataclass
class PreparedSample:
    record: SampleRecord
    mk: np.ndarray            # knowledge mask at working resolution
    ma: np.ndarray            # advice mask at working resolution
    diff: np.ndarray          # agreement map, float
    excluded: bool
    image_work: np.ndarray    # [h, w, 3] float, for the in-loop CRF


def prepare_static(records: list[SampleRecord], cfg: StaticStageConfig,
                   progress=None) -> list[PreparedSample]:
    """Derive knowledge/advice mask pairs for every record (CRF runs once)."""
    if not records:
        raise ValueError("empty dataset")
    dtype = np.dtype(cfg.dtype)
    out = []
    for i, rec in enumerate(records):
        h, w = rec.gt.shape
        wh, ww = h // 2, w // 2
        p_full = rec.seed_prob.astype(np.float64)
        if cfg.crf_full_res:
            pa_full = crf_refine(p_full, rec.image.astype(np.float64),
                                 cfg.crf, windowed=cfg.crf_windowed)
            pa_work = nk.bilinear_resize(pa_full, wh, ww)
        else:
            pa_work = crf_refine(
                np.ascontiguousarray(nk.bilinear_resize(p_full, wh, ww)),
                _resize_image(rec.image, wh, ww), cfg.crf,
                windowed=cfg.crf_windowed)
        p_work = nk.bilinear_resize(p_full, wh, ww)
        mk = present_label_argmax(p_work, rec.labels)
        ma = present_label_argmax(pa_work, rec.labels)
        out.append(PreparedSample(
            record=rec,
            mk=mk,
            ma=ma,
            diff=difference_mask(mk, ma).astype(dtype),
            excluded=exclude_pair(mk, ma, rec.labels, cfg.exclude_quantifier),
            image_work=_resize_image(rec.image, wh, ww),
        ))
        if progress and (i + 1) % 50 == 0:
            progress(f"advice mapping {i + 1}/{len(records)}")
    return out


@dataclass
class StaticResult:
    seg: SegNetToy
    dd: DDNet
    base_losses: list[float]    # per-epoch mean segmentation loss
    diff_losses: list[float]    # per-epoch mean confidence loss


def _flip_sample(image, masks):
    return (np.ascontiguousarray(image[:, ::-1]),
            [np.ascontiguousarray(m[:, ::-1]) for m in masks])


def static_stage_train(records: list[SampleRecord], cfg: StaticStageConfig,
                       prepared: list[PreparedSample] | None = None,
                       progress=None) -> tuple[StaticResult, list[PreparedSample]]:
    """Train the base branch and the stage-1 difference-detection net."""
    if prepared is None:
        prepared = prepare_static(records, cfg, progress=progress)
    n = len(prepared)
    class_count = prepared[0].record.seed_prob.shape[0] - 1
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    seg = SegNetToy(rng, class_count, dtype=dtype)
    dd = make_ddnet(rng, seg, width=cfg.dd_width, dtype=dtype)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = nk.Schedule(cfg.base_lr, cfg.epochs * steps_per_epoch)
    base_losses, diff_losses = [], []
    order = np.arange(n)
    step = 0
    seg_params = seg.enc_parameters() + seg.main_parameters()
    dd_params = dd.parameters()
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_base, epoch_diff = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            binv = 1.0 / len(batch)
            seg_grads = [np.zeros_like(p) for p in seg_params]
            dd_grads = [np.zeros_like(p) for p in dd_params]
            loss_base = loss_diff = 0.0
            for idx in batch:
                smp = prepared[idx]
                image, mk, ma, diff = smp.record.image, smp.mk, smp.ma, smp.diff
                if cfg.flip_augment and rng.random() < 0.5:
                    image, (mk, ma, diff) = _flip_sample(image, [mk, ma, diff])
                pm, _, feats, cache = seg.forward(image)
                l_base, g_main = nk.cross_entropy_seg(pm, mk)
                enc_g, main_g, _ = seg.backward(cache, g_main * binv, None)
                for acc, g in zip(seg_grads, enc_g + main_g):
                    acc += g
                loss_base += l_base * binv

                if not smp.excluded:
                    l_diff = 0.0
                    for mask in (mk, ma):
                        d, dcache = dd.forward(
                            feats, mask_to_onehot(mask, class_count, dtype=dtype))
                        l, grad_d = nk.bce(diff, d)
                        l_diff += l
                        for acc, g in zip(dd_grads, dd.backward(dcache, grad_d * binv)):
                            acc += g
                    loss_diff += l_diff * binv
            nk.sgd_step(seg_params, seg_grads, sched, step)
            nk.sgd_step(dd_params, dd_grads, sched, step)
            step += 1
            epoch_base += loss_base / steps_per_epoch
            epoch_diff += loss_diff / steps_per_epoch
        base_losses.append(epoch_base)
        diff_losses.append(epoch_diff)
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs}: "
                     f"base {epoch_base:.4f} diff {epoch_diff:.4f}")
    return StaticResult(seg, dd, base_losses, diff_losses), prepared


@dataclass
class RefinedMasks:
    knowledge: np.ndarray   # working resolution
    advice: np.ndarray
    fused: np.ndarray


def static_refine(prepared: list[PreparedSample], seg: SegNetToy, dd: DDNet,
                  bias: BiasParams | None = None) -> list[RefinedMasks]:
    """Fuse every (knowledge, advice) pair with the trained confidence net."""
    bias = bias or BiasParams()
    class_count = seg.class_count
    dtype = seg.dtype
    out = []
    for smp in prepared:
        _, _, feats, _ = seg.forward(smp.record.image)
        dk = dd.forward(feats, mask_to_onehot(smp.mk, class_count, dtype=dtype))[0]
        da = dd.forward(feats, mask_to_onehot(smp.ma, class_count, dtype=dtype))[0]
        failing = failing_classes(smp.mk, smp.ma, smp.record.labels)
        w = confidence_score(dk, da, bias_map(smp.mk, smp.ma, failing, bias,
                                              dtype=np.float64))
        out.append(RefinedMasks(knowledge=smp.mk, advice=smp.ma,
                                fused=fuse_masks(smp.mk, smp.ma, w)))
    return out


# ---------------------------------------------------------------------------
# dynamic stage


@dataclass
class DynamicStepLosses:
    main: float
    sub: float
    diff1: float
    diff2: float

    @property
    def total(self) -> float:
        return self.main + self.sub + self.diff1 + self.diff2


@dataclass
class DynamicResult:
    seg: SegNetToy
    dd1: DDNet
    dd2: DDNet
    epoch_losses: list[DynamicStepLosses]


class _GradAccumulator:
    def __init__(self, groups: dict[str, list[np.ndarray]]):
        self.params = groups
        self.grads = {k: [np.zeros_like(p) for p in ps] for k, ps in groups.items()}

    def add(self, key: str, grads: list[np.ndarray]) -> None:
        for acc, g in zip(self.grads[key], grads):
            acc += g

    def step(self, sched: nk.Schedule, step: int) -> None:
        for key, params in self.params.items():
            nk.sgd_step(params, self.grads[key], sched, step)


def dynamic_step(smp: PreparedSample, seed_mask: np.ndarray, seg: SegNetToy,
                 dd1: DDNet, dd2: DDNet, cfg: DynamicStageConfig,
                 acc: _GradAccumulator | None = None,
                 weight: float = 1.0, flip: bool = False
                 ) -> tuple[DynamicStepLosses, dict[str, np.ndarray]]:
    """One sample's losses (and gradients, when an accumulator is given)."""
    class_count = seg.class_count
    dtype = seg.dtype
    labels = smp.record.labels
    image, image_work, md0 = smp.record.image, smp.image_work, seed_mask
    if flip:
        image, (md0,) = _flip_sample(image, [md0])
        image_work = np.ascontiguousarray(smp.image_work[:, ::-1])
    if md0.shape != (image.shape[0] // 2, image.shape[1] // 2):
        raise ValueError(f"seed mask shape {md0.shape} is not the working resolution")

    pm, ps, feats, cache = seg.forward(image)

    # first refinement: the model's own mask against its CRF mapping
    pa = crf_refine(np.ascontiguousarray(pm.astype(np.float64)), image_work,
                    cfg.crf, windowed=cfg.crf_windowed)
    mk1 = present_label_argmax(pm, labels)
    ma1 = present_label_argmax(pa.astype(dtype), labels)
    d_k1, cache_k1 = dd1.forward(feats, mask_to_onehot(mk1, class_count, dtype=dtype))
    d_a1, cache_a1 = dd1.forward(feats, mask_to_onehot(ma1, class_count, dtype=dtype))
    w1 = confidence_score(
        d_k1, d_a1,
        bias_map(mk1, ma1, failing_classes(mk1, ma1, labels), cfg.bias,
                 dtype=np.float64))
    md1 = fuse_masks(mk1, ma1, w1)

    # second refinement: stage-1 seed against the first refinement
    d_d0, cache_d0 = dd2.forward(feats, mask_to_onehot(md0, class_count, dtype=dtype))
    d_d1, cache_d1 = dd2.forward(feats, mask_to_onehot(md1, class_count, dtype=dtype))
    w2 = confidence_score(
        d_d0, d_d1,
        bias_map(md0, md1, failing_classes(md0, md1, labels), cfg.bias,
                 dtype=np.float64))
    md2 = fuse_masks(md0, md1, w2)

    m_sub = present_label_argmax(ps, labels)

    l_main, g_main = nk.cross_entropy_seg(pm, md2)
    l0, g0 = nk.cross_entropy_seg(ps, md0)
    l1, g1 = nk.cross_entropy_seg(ps, md1)
    l_sub = cfg.alpha * l0 + (1.0 - cfg.alpha) * l1
    g_sub = cfg.alpha * g0 + (1.0 - cfg.alpha) * g1

    l_diff1 = 0.0
    dd1_grads = None
    if not exclude_pair(mk1, ma1, labels, cfg.exclude_quantifier):
        diff1 = difference_mask(mk1, ma1).astype(dtype)
        la, grad_a = nk.bce(diff1, d_k1)
        lb, grad_b = nk.bce(diff1, d_a1)
        l_diff1 = la + lb
        if acc is not None:
            acc.add("dd1", dd1.backward(cache_k1, grad_a * weight))
            acc.add("dd1", dd1.backward(cache_a1, grad_b * weight))

    diff_d0_sub = difference_mask(md0, m_sub).astype(dtype)
    diff_sub_d1 = difference_mask(m_sub, md1).astype(dtype)
    la, grad_a = nk.bce(diff_d0_sub, d_d0)
    lb, grad_b = nk.bce(diff_sub_d1, d_d1)
    l_diff2 = la + lb

    if acc is not None:
        acc.add("dd2", dd2.backward(cache_d0, grad_a * weight))
        acc.add("dd2", dd2.backward(cache_d1, grad_b * weight))
        enc_g, main_g, sub_g = seg.backward(cache, g_main * weight, g_sub * weight)
        acc.add("enc", enc_g)
        acc.add("main", main_g)
        acc.add("sub", sub_g)

    losses = DynamicStepLosses(main=l_main, sub=l_sub, diff1=l_diff1, diff2=l_diff2)
    masks = {"mk1": mk1, "ma1": ma1, "md1": md1, "md2": md2, "msub": m_sub}
    return losses, masks


def dynamic_stage_train(records: list[SampleRecord], seeds: list[np.ndarray],
                        seg: SegNetToy, cfg: DynamicStageConfig,
                        prepared: list[PreparedSample] | None = None,
                        progress=None) -> DynamicResult:
    """Full stage-2 loop; `seeds` are stage-1 fused masks at working resolution."""
    if len(records) != len(seeds):
        raise ValueError(f"{len(records)} records vs {len(seeds)} seed masks")
    if not records:
        raise ValueError("empty dataset")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    dd1 = make_ddnet(rng, seg, width=cfg.dd_width, dtype=dtype)
    dd2 = make_ddnet(rng, seg, width=cfg.dd_width, dtype=dtype)
    if prepared is None:
        prepared = [PreparedSample(record=rec, mk=None, ma=None, diff=None,
                                   excluded=False,
                                   image_work=_resize_image(
                                       rec.image, rec.gt.shape[0] // 2,
                                       rec.gt.shape[1] // 2))
                    for rec in records]

    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = nk.Schedule(cfg.base_lr, cfg.epochs * steps_per_epoch)
    order = np.arange(n)
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        totals = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            binv = 1.0 / len(batch)
            acc = _GradAccumulator({
                "enc": seg.enc_parameters(),
                "main": seg.main_parameters(),
                "sub": seg.sub_parameters(),
                "dd1": dd1.parameters(),
                "dd2": dd2.parameters(),
            })
            for idx in batch:
                flip = bool(cfg.flip_augment and rng.random() < 0.5)
                losses, _ = dynamic_step(prepared[idx], seeds[idx], seg, dd1,
                                         dd2, cfg, acc=acc, weight=binv,
                                         flip=flip)
                totals += np.array([losses.main, losses.sub, losses.diff1,
                                    losses.diff2]) * binv
            acc.step(sched, step)
            step += 1
        mean = totals / steps_per_epoch
        epoch_losses.append(DynamicStepLosses(*mean))
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs}: "
                     f"main {mean[0]:.4f} sub {mean[1]:.4f} "
                     f"diff1 {mean[2]:.4f} diff2 {mean[3]:.4f}")
    return DynamicResult(seg, dd1, dd2, epoch_losses)


def warm_start_sub_head(seg: SegNetToy) -> None:
    """Start the auxiliary head from the trained base branch (disjoint copies)."""
    seg.head_sub.weights[...] = seg.head_main.weights
    seg.head_sub.bias[...] = seg.head_main.bias


def predict_masks(records: list[SampleRecord], seg: SegNetToy) -> list[np.ndarray]:
    """Main-head present-label masks at working resolution."""
    out = []
    for rec in records:
        pm, _, _, _ = seg.forward(rec.image)
        out.append(present_label_argmax(pm, rec.labels))
    return out
