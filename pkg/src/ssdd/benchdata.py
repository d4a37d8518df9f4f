"""Synthetic shape-world benchmark: images, ground truth, corrupted seeds.

Each sample is a handful of colored shapes (rectangle, circle, triangle) on a
dark background with Gaussian pixel noise.  Seed probability maps emulate the
output of an upstream weak-localization step: the ground truth is corrupted
by per-object boundary jitter and by erasing small objects, then converted to
a softened one-hot distribution.  Ground truth itself is never corrupted.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .fileio import (atomic_write_bytes, read_pgm, read_ppm, read_probmap,
                     write_pgm, write_ppm, write_probmap)


@dataclass
class CorruptionModel:
    boundary_jitter: int = 3            # max dilation/erosion radius
    jitter_prob: float = 0.9            # per-object chance of a boundary jitter
    small_object_erase_prob: float = 0.5
    small_object_area: int = 64         # components below this may vanish
    confidence_softening: float = 2.0   # temperature for the seed distribution

    def scaled(self, level: float) -> "CorruptionModel":
        """Corruption intensity scaled by a non-negative level (0 = pristine)."""
        if level < 0:
            raise ValueError("corruption level must be non-negative")
        return replace(self,
                       jitter_prob=min(1.0, self.jitter_prob * level),
                       small_object_erase_prob=min(1.0, self.small_object_erase_prob * level))


@dataclass
class WorldSpec:
    image_size: int = 64
    class_count: int = 5
    min_shapes: int = 1
    max_shapes: int = 4
    noise_sigma: float = 8.0
    corruption: CorruptionModel = field(default_factory=CorruptionModel)


@dataclass
class SampleRecord:
    image: np.ndarray       # [H, W, 3] uint8
    seed_prob: np.ndarray   # [C+1, H, W] float32, normalized per pixel
    labels: frozenset       # foreground classes present in gt
    gt: np.ndarray          # [H, W] uint8, evaluation only


BACKGROUND_COLOR = (54.0, 54.0, 54.0)


def palette(class_count: int) -> np.ndarray:
    """[C+1, 3] distinct colors, background first."""
    colors = [BACKGROUND_COLOR]
    for c in range(class_count):
        r, g, b = colorsys.hsv_to_rgb(c / class_count, 0.78, 0.82)
        colors.append((r * 255.0, g * 255.0, b * 255.0))
    return np.array(colors)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def _paint_shape(gt: np.ndarray, rng: np.random.Generator, class_count: int) -> None:
    size = gt.shape[0]
    cls = int(rng.integers(1, class_count + 1))
    kind = int(rng.integers(0, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.integers(5, size - 5, size=2)
    # sized so a typical shape survives local smoothing; occlusion fragments
    # and the erase corruption still provide genuinely small objects
    r_lo = max(3, round(size * 0.09))
    r_hi = max(r_lo + 2, round(size * 0.37))
    r = int(rng.integers(r_lo, r_hi))
    if kind == 0:           # axis-aligned rectangle
        hh = int(rng.integers(r_lo, r_hi))
        region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= r)
    elif kind == 1:         # circle
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:                   # triangle from three jittered vertices
        ang = rng.uniform(0, 2 * math.pi)
        verts = []
        for k in range(3):
            a = ang + k * 2 * math.pi / 3 + rng.uniform(-0.4, 0.4)
            rad = r * rng.uniform(0.8, 1.3)
            verts.append((cy + rad * math.sin(a), cx + rad * math.cos(a)))
        region = np.ones_like(gt, dtype=bool)
        for k in range(3):
            y0, x0 = verts[k]
            y1, x1 = verts[(k + 1) % 3]
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            region &= cross >= 0 if _tri_orientation(verts) > 0 else cross <= 0
    gt[region] = cls


def _tri_orientation(verts) -> float:
    (y0, x0), (y1, x1), (y2, x2) = verts
    return (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)


def corrupt_mask(gt: np.ndarray, model: CorruptionModel,
                 rng: np.random.Generator) -> np.ndarray:
    """Jittered/eroded copy of gt emulating noisy seed localization."""
    mask = gt.copy()
    for c in sorted(int(v) for v in np.unique(gt) if v != 0):
        comps, n_comp = ndimage.label(gt == c)
        for i in range(1, n_comp + 1):
            region = comps == i
            area = int(region.sum())
            if (area < model.small_object_area
                    and rng.random() < model.small_object_erase_prob):
                mask[region] = 0
                continue
            if model.boundary_jitter > 0 and rng.random() < model.jitter_prob:
                radius = int(rng.integers(1, model.boundary_jitter + 1))
                foot = _disk(radius)
                if rng.random() < 0.5:
                    grown = ndimage.binary_dilation(region, structure=foot)
                    mask[grown] = c
                else:
                    kept = ndimage.binary_erosion(region, structure=foot)
                    mask[region & ~kept] = 0
    return mask


def soften_mask(mask: np.ndarray, class_count: int, temperature: float) -> np.ndarray:
    """Softened one-hot of a label mask: softmax(one_hot / temperature)."""
    e_true = math.exp(1.0 / temperature)
    z = e_true + class_count          # other C channels contribute exp(0) each
    p = np.full((class_count + 1,) + mask.shape, 1.0 / z, dtype=np.float32)
    h, w = mask.shape
    p[mask.reshape(-1), np.repeat(np.arange(h), w), np.tile(np.arange(w), h)] = e_true / z
    return p


def _make_record(spec: WorldSpec, rng: np.random.Generator) -> SampleRecord:
    size = spec.image_size
    gt = np.zeros((size, size), dtype=np.uint8)
    labels: frozenset = frozenset()
    while not labels:
        gt[:] = 0
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            _paint_shape(gt, rng, spec.class_count)
        labels = frozenset(int(v) for v in np.unique(gt) if v != 0)

    colors = palette(spec.class_count)
    img = colors[gt] + rng.normal(0.0, spec.noise_sigma, size=(size, size, 3))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    corrupted = corrupt_mask(gt, spec.corruption, rng)
    seed_prob = soften_mask(corrupted, spec.class_count,
                            spec.corruption.confidence_softening)
    return SampleRecord(image=image, seed_prob=seed_prob, labels=labels, gt=gt)


def generate(spec: WorldSpec, n: int, seed: int) -> list[SampleRecord]:
    """n deterministic samples; per-record RNG streams derive from one seed."""
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    streams = np.random.SeedSequence(seed).spawn(n)
    return [_make_record(spec, np.random.default_rng(s)) for s in streams]


# ---------------------------------------------------------------------------
# dataset directory layout: images/NNNN.ppm, gt/NNNN.pgm, seeds/NNNN.spm,
# labels.txt with one "NNNN c1 c2 ..." line per record


def write_dataset(records: list[SampleRecord], directory: str) -> None:
    lines = []
    for i, rec in enumerate(records):
        rid = f"{i:04d}"
        write_ppm(os.path.join(directory, "images", rid + ".ppm"), rec.image)
        write_pgm(os.path.join(directory, "gt", rid + ".pgm"), rec.gt)
        write_probmap(os.path.join(directory, "seeds", rid + ".spm"), rec.seed_prob)
        lines.append(" ".join([rid] + [str(c) for c in sorted(rec.labels)]))
    atomic_write_bytes(os.path.join(directory, "labels.txt"),
                       ("\n".join(lines) + "\n").encode("ascii"))


def read_dataset(directory: str) -> list[SampleRecord]:
    index = os.path.join(directory, "labels.txt")
    if not os.path.exists(index):
        raise OSError(f"{index}: missing dataset index")
    records = []
    with open(index, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            rid, classes = parts[0], frozenset(int(c) for c in parts[1:])
            records.append(SampleRecord(
                image=read_ppm(os.path.join(directory, "images", rid + ".ppm")),
                seed_prob=read_probmap(os.path.join(directory, "seeds", rid + ".spm")),
                labels=classes,
                gt=read_pgm(os.path.join(directory, "gt", rid + ".pgm")),
            ))
    return records
