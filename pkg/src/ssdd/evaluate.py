"""Intersection-over-union evaluation with dataset-global accumulation.

Counts are accumulated over the whole mask list before any division, matching
the usual segmentation-benchmark protocol.  Ground-truth pixels labeled 255
are ignored entirely; classes whose union stays zero across the dataset are
left out of the mean.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .fileio import atomic_write_bytes

IGNORE = 255


@dataclass
class IoUReport:
    per_class_iou: list[float]          # nan for classes excluded from the mean
    mean_iou: float
    intersection: list[int] = field(default_factory=list)
    union: list[int] = field(default_factory=list)

    def defined_classes(self) -> list[int]:
        return [c for c, u in enumerate(self.union) if u > 0]


def iou_report(preds: list[np.ndarray], gts: list[np.ndarray], class_count: int) -> IoUReport:
    """IoU per class (background plus class_count foreground classes) and mean."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    n = class_count + 1
    inter = np.zeros(n, dtype=np.int64)
    union = np.zeros(n, dtype=np.int64)
    for idx, (pred, gt) in enumerate(zip(preds, gts)):
        if pred.shape != gt.shape:
            raise ValueError(
                f"pair {idx}: prediction shape {pred.shape} != ground truth {gt.shape}")
        valid = gt != IGNORE
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.size and (p.max() >= n or g.max() >= n):
            raise ValueError(f"pair {idx}: labels exceed class count {n - 1}")
        for c in range(n):
            pc = p == c
            gc = g == c
            inter[c] += int(np.count_nonzero(pc & gc))
            union[c] += int(np.count_nonzero(pc | gc))
    per_class = [inter[c] / union[c] if union[c] else float("nan") for c in range(n)]
    defined = [v for v in per_class if not np.isnan(v)]
    mean = float(np.mean(defined)) if defined else float("nan")
    return IoUReport(per_class_iou=per_class, mean_iou=mean,
                     intersection=[int(v) for v in inter],
                     union=[int(v) for v in union])


def report_to_csv(report: IoUReport) -> str:
    buf = io.StringIO()
    buf.write("class,iou,intersection,union\n")
    for c, iou in enumerate(report.per_class_iou):
        val = "" if np.isnan(iou) else f"{iou:.6f}"
        buf.write(f"{c},{val},{report.intersection[c]},{report.union[c]}\n")
    buf.write(f"mean,{report.mean_iou:.6f},,\n")
    return buf.getvalue()


def write_report_csv(path: str, report: IoUReport) -> None:
    atomic_write_bytes(path, report_to_csv(report).encode("utf-8"))


def read_report_csv(path: str) -> tuple[dict[int, float], float]:
    """Parse a report CSV back into (per-class IoU, mean IoU)."""
    per_class: dict[int, float] = {}
    mean = float("nan")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "class,iou,intersection,union":
            raise OSError(f"{path}: unexpected CSV header {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            if not parts or not parts[0]:
                continue
            if parts[0] == "mean":
                mean = float(parts[1])
            elif parts[1]:
                per_class[int(parts[0])] = float(parts[1])
    return per_class, mean


def format_table(report: IoUReport) -> str:
    """Aligned ASCII table of per-class and mean IoU."""
    names = [f"class {c}" if c else "background" for c in range(len(report.per_class_iou))]
    rows = []
    for name, iou in zip(names, report.per_class_iou):
        rows.append((name, "-" if np.isnan(iou) else f"{iou:.4f}"))
    rows.append(("mean IoU", f"{report.mean_iou:.4f}"))
    width = max(len(r[0]) for r in rows)
    lines = [f"{name:<{width}}  {val:>7}" for name, val in rows]
    sep = "-" * (width + 9)
    return "\n".join([sep] + lines[:-1] + [sep, lines[-1], sep])
