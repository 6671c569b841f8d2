"""Detection and segmentation metrics.

Detection metrics use greedy, class-aware, one-to-one matching and COCO
style 101-point interpolated average precision. Segmentation metrics are
computed per class from binary masks and pooled over foreground pixels.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import BinaryMask, BoundingBox, DefectCategory, Detection, ShapeError, box_iou

# k / 100 rounds exactly like tp / n_gt, so equal rationals compare equal
RECALL_GRID = np.arange(101) / 100
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GroundTruthItem:
    image_id: str
    box: BoundingBox
    category: DefectCategory
    mask: Optional[BinaryMask] = None

    def __post_init__(self):
        object.__setattr__(self, "category", DefectCategory.parse(self.category))


@dataclass(frozen=True)
class MatchResult:
    assignments: tuple[tuple[Detection, GroundTruthItem, float], ...]
    fp: tuple[Detection, ...]
    fn: tuple[GroundTruthItem, ...]

    @property
    def tp_count(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float

    def as_row(self) -> dict:
        return {
            "Precision": self.precision,
            "Recall": self.recall,
            "mAP50": self.map50,
            "mAP50:95": self.map50_95,
            "F1-score": self.f1,
        }


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    precision: float
    recall: float
    f1: float
    pixel_accuracy: float
    per_class_iou: Optional[dict] = None

    def as_row(self) -> dict:
        return {
            "mIoU": self.miou,
            "Precision": self.precision,
            "Recall": self.recall,
            "F1-score": self.f1,
            "PA": self.pixel_accuracy,
        }


def _pred_order(d: Detection):
    # confidence descending, then (image id, x, y) for determinism
    return (-d.confidence, d.image_id or "", d.box.x, d.box.y, d.box.w, d.box.h)


def _match_flags(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem], iou_t: float):
    """Greedy matching; yields (prediction, matched gt or None, iou) in confidence order."""
    gt_by_key: dict[tuple, list[GroundTruthItem]] = defaultdict(list)
    for g in ground_truths:
        gt_by_key[(g.image_id, g.category)].append(g)
    taken: set[int] = set()
    results = []
    for p in sorted(predictions, key=_pred_order):
        best, best_iou = None, -1.0
        for g in gt_by_key.get((p.image_id, p.category), ()):
            if id(g) in taken:
                continue
            iou = box_iou(p.box, g.box)
            if iou >= iou_t and iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            taken.add(id(best))
        results.append((p, best, best_iou))
    return results, taken


def match(
    predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem], iou_t: float = 0.5
) -> MatchResult:
    if not 0.0 < iou_t <= 1.0:
        raise ValueError(f"iou_t must lie in (0, 1], got {iou_t}")
    results, taken = _match_flags(predictions, ground_truths, iou_t)
    assignments = tuple((p, g, iou) for p, g, iou in results if g is not None)
    fp = tuple(p for p, g, _ in results if g is None)
    fn = tuple(g for g in ground_truths if id(g) not in taken)
    return MatchResult(assignments, fp, fn)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def interpolated_ap(tp_flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP of a confidence-ordered TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def per_class_ap(
    predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem], iou_t: float = 0.5
) -> dict[DefectCategory, float]:
    gt_count: dict[DefectCategory, int] = defaultdict(int)
    for g in ground_truths:
        gt_count[g.category] += 1
    out = {}
    for cat in sorted(gt_count, key=lambda c: c.value):
        preds = [p for p in predictions if p.category is cat]
        gts = [g for g in ground_truths if g.category is cat]
        results, _ = _match_flags(preds, gts, iou_t)
        out[cat] = interpolated_ap([g is not None for _, g, _ in results], gt_count[cat])
    return out


def average_precision(
    predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem], iou_t: float = 0.5
) -> float:
    """Class-mean AP at one IoU threshold; classes without ground truth are skipped."""
    aps = per_class_ap(predictions, ground_truths, iou_t)
    if not aps:
        return 0.0
    return float(np.mean(list(aps.values())))


def map_range(
    predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem]
) -> tuple[float, float]:
    aps = [average_precision(predictions, ground_truths, t) for t in COCO_THRESHOLDS]
    return aps[0], float(np.mean(aps))


def detection_metrics(
    predictions: Sequence[Detection], ground_truths: Sequence[GroundTruthItem], iou_t: float = 0.5
) -> DetectionMetrics:
    """Micro-averaged P/R/F1 at ``iou_t`` plus mAP50 and mAP50:95."""
    m = match(predictions, ground_truths, iou_t)
    p, r, f1 = prf1(m.tp_count, len(m.fp), len(m.fn))
    map50, map50_95 = map_range(predictions, ground_truths)
    return DetectionMetrics(p, r, f1, map50, map50_95)


def seg_metrics(
    pred: Mapping[DefectCategory, BinaryMask], gt: Mapping[DefectCategory, BinaryMask]
) -> SegMetrics:
    masks = list(pred.values()) + list(gt.values())
    if not masks:
        raise ValueError("seg_metrics needs at least one mask")
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise ShapeError(f"mask dimension mismatch: {sorted(shapes)}")
    (shape,) = shapes
    empty = np.zeros(shape, dtype=bool)

    ious = {}
    tp = fp = fn = 0
    pred_stack, gt_stack = [], []
    for cat in sorted(set(pred) | set(gt), key=lambda c: DefectCategory.parse(c).value):
        p = pred[cat].array if cat in pred else empty
        g = gt[cat].array if cat in gt else empty
        pred_stack.append(p)
        gt_stack.append(g)
        inter = int(np.count_nonzero(p & g))
        union = int(np.count_nonzero(p | g))
        tp += inter
        fp += int(np.count_nonzero(p)) - inter
        fn += int(np.count_nonzero(g)) - inter
        if union:
            ious[DefectCategory.parse(cat)] = inter / union

    miou = float(np.mean(list(ious.values()))) if ious else 1.0
    precision, recall, f1 = prf1(tp, fp, fn)
    # a pixel is correct when its predicted class set equals the true class set
    correct = np.all(np.stack(pred_stack) == np.stack(gt_stack), axis=0)
    pa = float(np.count_nonzero(correct)) / correct.size
    return SegMetrics(miou, precision, recall, f1, pa, {c.value: v for c, v in ious.items()})


def metrics_dict(metrics) -> dict:
    return asdict(metrics)
