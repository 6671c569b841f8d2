"""Ensemble fusion of expert outputs.

Detections from several detectors are grouped into class-aware,
single-link clusters (two boxes are linked when their IoU reaches the
threshold). The *union* strategy keeps one representative per cluster; the
*intersection* strategy keeps only clusters supported by several distinct
experts and averages their coordinates. Crack masks from dedicated crack
segmenters are fused by pixel-wise OR.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .geometry import BinaryMask, BoundingBox, Detection, box_iou, mask_union


class ScoreRule(str, enum.Enum):
    MAX = "max"
    MEAN = "mean"
    WEIGHTED_AVG = "weighted_avg"


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.6
    min_agreement: int = 2
    score_rule: ScoreRule = ScoreRule.MAX

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.min_agreement < 2:
            raise ValueError(f"min_agreement must be >= 2, got {self.min_agreement}")
        object.__setattr__(self, "score_rule", ScoreRule(self.score_rule))

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "FusionConfig":
        return cls(**(data or {}))


@dataclass(frozen=True)
class ExpertOutput:
    """What one expert returned for one image: detections or a crack mask."""

    expert: str
    detections: Optional[tuple[Detection, ...]] = None
    mask: Optional[BinaryMask] = None
    image_id: Optional[str] = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if (self.detections is None) == (self.mask is None):
            raise ValueError(f"expert output {self.expert!r} must carry exactly one payload")
        if self.detections is not None:
            dets = tuple(self.detections)
            for d in dets:
                if d.source != self.expert:
                    raise ValueError(
                        f"detection from {d.source!r} listed under expert {self.expert!r}"
                    )
            object.__setattr__(self, "detections", dets)

    @property
    def is_mask(self) -> bool:
        return self.mask is not None


Cluster = tuple[Detection, ...]


def _sort_key(d: Detection):
    b = d.box
    return (d.category.value, d.source, b.x, b.y, b.w, b.h, -d.confidence)


def _collect(outputs: Sequence[ExpertOutput]) -> list[Detection]:
    dets: list[Detection] = []
    images: set[str] = set()
    for out in outputs:
        if out.detections is None:
            raise ValueError(f"expert {out.expert!r} produced a mask, not detections")
        if out.image_id is not None:
            images.add(out.image_id)
        for d in out.detections:
            if d.image_id is not None:
                images.add(d.image_id)
            dets.append(d)
    if len(images) > 1:
        raise ValueError(f"detections bound to several images: {sorted(images)}")
    # canonical order makes every downstream reduction independent of input order
    dets.sort(key=_sort_key)
    return dets


def cluster_boxes(outputs: Sequence[ExpertOutput], cfg: FusionConfig = FusionConfig()) -> list[Cluster]:
    """Single-link, class-aware clustering of all detections."""
    if not outputs:
        raise ValueError("cluster_boxes needs at least one detector output")
    dets = _collect(outputs)
    parent = list(range(len(dets)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(dets)):
        for j in range(i + 1, len(dets)):
            if dets[i].category is not dets[j].category:
                continue
            if box_iou(dets[i].box, dets[j].box) >= cfg.iou_threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[Detection]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(find(i), []).append(d)
    # members are already in canonical order; order clusters by their first member
    return [tuple(members) for _, members in sorted(groups.items())]


def representative(cluster: Cluster) -> Detection:
    """Max-confidence member; ties go to the smallest (expert id, x, y)."""
    return min(cluster, key=lambda d: (-d.confidence, d.source, d.box.x, d.box.y))


def _weighted_box(cluster: Cluster) -> BoundingBox:
    total = sum(d.confidence for d in cluster)
    if total > 0:
        weights = [d.confidence / total for d in cluster]
    else:
        weights = [1.0 / len(cluster)] * len(cluster)
    x = sum(w * d.box.x for w, d in zip(weights, cluster))
    y = sum(w * d.box.y for w, d in zip(weights, cluster))
    x2 = sum(w * d.box.x2 for w, d in zip(weights, cluster))
    y2 = sum(w * d.box.y2 for w, d in zip(weights, cluster))
    return BoundingBox(x, y, x2 - x, y2 - y)


def _mean_confidence(cluster: Cluster) -> float:
    return min(1.0, sum(d.confidence for d in cluster) / len(cluster))


def _output_order(d: Detection):
    return (d.category.value, -d.confidence, d.box.x, d.box.y, d.box.w, d.box.h, d.source)


def fuse_cluster(cluster: Cluster, rule: ScoreRule, source: Optional[str] = None) -> Detection:
    best = representative(cluster)
    if rule is ScoreRule.MAX:
        box, conf = best.box, best.confidence
    elif rule is ScoreRule.MEAN:
        box, conf = best.box, _mean_confidence(cluster)
    else:
        box, conf = _weighted_box(cluster), _mean_confidence(cluster)
    return Detection(box, best.category, conf, source or best.source, best.image_id)


def experts_in(cluster: Cluster) -> set[str]:
    return {d.source for d in cluster}


def fuse_union(outputs: Sequence[ExpertOutput], cfg: FusionConfig = FusionConfig()) -> list[Detection]:
    fused = [fuse_cluster(c, cfg.score_rule) for c in cluster_boxes(outputs, cfg)]
    return sorted(fused, key=_output_order)


def intersection_clusters(clusters: Sequence[Cluster], cfg: FusionConfig = FusionConfig()) -> list[Cluster]:
    return [c for c in clusters if len(experts_in(c)) >= cfg.min_agreement]


def fuse_intersection(
    outputs: Sequence[ExpertOutput], cfg: FusionConfig = FusionConfig()
) -> list[Detection]:
    kept = intersection_clusters(cluster_boxes(outputs, cfg), cfg)
    fused = [fuse_cluster(c, ScoreRule.WEIGHTED_AVG, source="intersection") for c in kept]
    return sorted(fused, key=_output_order)


def crack_mask_union(outputs: Sequence[ExpertOutput]) -> BinaryMask:
    masks = []
    for out in outputs:
        if out.mask is None:
            raise ValueError(f"expert {out.expert!r} produced detections, not a crack mask")
        masks.append(out.mask)
    return mask_union(masks)
