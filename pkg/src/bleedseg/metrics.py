"""Segmentation quality metrics and the per-image evaluation report.

All scores derive from the binary confusion counts except the Hausdorff
distance, which compares boundary geometry on the pixel grid. Degenerate
images (nothing to find, nothing predicted) score 1.0 on overlap metrics; the
Hausdorff distance is undefined when exactly one mask is empty and such images
are excluded from its aggregate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .data import ImageSample, Mask, check_binary_mask
from .trainer import Checkpoint, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(pred: Mask, truth: Mask) -> Confusion:
    check_binary_mask(pred)
    check_binary_mask(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return Confusion(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def dice_score(c: Confusion) -> float:
    """2 TP / (2 TP + FP + FN); a perfectly empty pair counts as 1."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def _iou(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def iou_foreground(c: Confusion) -> float:
    return _iou(c.tp, c.tp + c.fp + c.fn)


def iou_background(c: Confusion) -> float:
    return _iou(c.tn, c.tn + c.fp + c.fn)


def miou(c: Confusion) -> float:
    """Mean of the foreground and background IoU."""
    return 0.5 * (iou_foreground(c) + iou_background(c))


def sensitivity(c: Confusion) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def precision(c: Confusion) -> float:
    denom = c.tp + c.fp
    return 1.0 if denom == 0 else c.tp / denom


def hausdorff(a: Mask, b: Mask) -> float | None:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels.

    Both masks empty: 0. Exactly one empty: undefined, returned as None.
    """
    check_binary_mask(a)
    check_binary_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    pa = np.argwhere(a).astype(np.float64)
    pb = np.argwhere(b).astype(np.float64)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return None
    return max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])


@dataclass
class ImageMetrics:
    id: str
    dice: float
    iou_fg: float
    iou_bg: float
    miou: float
    sensitivity: float
    precision: float
    hd: float | None


@dataclass
class MetricReport:
    per_image: list[ImageMetrics]
    aggregate: ImageMetrics  # id == "AGGREGATE"; unweighted means
    hd_excluded: int  # images whose Hausdorff distance was undefined


def score_pair(image_id: str, pred: Mask, truth: Mask) -> ImageMetrics:
    c = confusion(pred, truth)
    return ImageMetrics(
        id=image_id,
        dice=dice_score(c),
        iou_fg=iou_foreground(c),
        iou_bg=iou_background(c),
        miou=miou(c),
        sensitivity=sensitivity(c),
        precision=precision(c),
        hd=hausdorff(pred, truth),
    )


def aggregate_metrics(rows: list[ImageMetrics]) -> tuple[ImageMetrics, int]:
    if not rows:
        raise ValueError("cannot aggregate an empty report")
    n = len(rows)
    hds = [r.hd for r in rows if r.hd is not None]
    agg = ImageMetrics(
        id="AGGREGATE",
        dice=sum(r.dice for r in rows) / n,
        iou_fg=sum(r.iou_fg for r in rows) / n,
        iou_bg=sum(r.iou_bg for r in rows) / n,
        miou=sum(r.miou for r in rows) / n,
        sensitivity=sum(r.sensitivity for r in rows) / n,
        precision=sum(r.precision for r in rows) / n,
        hd=sum(hds) / len(hds) if hds else None,
    )
    return agg, n - len(hds)


def evaluate(ckpt: Checkpoint, samples: list[ImageSample]) -> MetricReport:
    """Score the teacher model on every (image, mask) pair."""
    if not samples:
        raise ValueError("nothing to evaluate")
    rows = []
    for s in samples:
        if s.mask is None:
            raise ValueError(f"sample {s.id} has no ground-truth mask")
        rows.append(score_pair(s.id, predict(ckpt, s.pixels), s.mask))
    agg, excluded = aggregate_metrics(rows)
    if excluded:
        log.info("Hausdorff undefined for %d of %d images; aggregate skips them",
                 excluded, len(rows))
    return MetricReport(per_image=rows, aggregate=agg, hd_excluded=excluded)


CSV_HEADER = "id,dice,iou_fg,iou_bg,miou,sensitivity,precision,hd"


def _csv_row(m: ImageMetrics) -> str:
    vals = [f"{v:.6f}" for v in (m.dice, m.iou_fg, m.iou_bg, m.miou,
                                 m.sensitivity, m.precision)]
    vals.append("" if m.hd is None else f"{m.hd:.6f}")
    return ",".join([m.id] + vals)


def report_to_csv(report: MetricReport) -> str:
    lines = [CSV_HEADER]
    lines += [_csv_row(m) for m in report.per_image]
    lines.append(_csv_row(report.aggregate))
    return "\n".join(lines) + "\n"
