"""Dataset refinement: near-duplicate pruning, clutter filtering, quality gate."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import yaml

from .geometry import DefectCategory, RasterImage, ShapeError

DEFAULT_NEGATIVES = ("pipes", "windows", "air conditioners")

Concept = tuple[str, np.ndarray]


@dataclass(frozen=True)
class CurationConfig:
    dedup_threshold: float = 0.95
    negative_concepts: tuple[str, ...] = DEFAULT_NEGATIVES
    negative_margin: float = 0.0
    min_side: int = 512
    aspect_range: tuple[float, float] = (1 / 3, 3.0)
    blur_min_variance: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.dedup_threshold < 1.0:
            raise ValueError(f"dedup_threshold must be in (0, 1), got {self.dedup_threshold}")
        lo, hi = self.aspect_range
        if not lo < hi:
            raise ValueError(f"aspect_range low {lo} must be below high {hi}")
        object.__setattr__(self, "aspect_range", (float(lo), float(hi)))
        object.__setattr__(self, "negative_concepts", tuple(self.negative_concepts))

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "CurationConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown curation settings: {sorted(unknown)}")
        if "aspect_range" in data:
            data["aspect_range"] = tuple(data["aspect_range"])
        return cls(**data)

    @classmethod
    def load(cls, path: "str | Path") -> "CurationConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _unit_rows(items: Sequence[tuple[str, np.ndarray]]) -> np.ndarray:
    rows = []
    dim = None
    for iid, vec in items:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if dim is None:
            dim = v.size
        elif v.size != dim:
            raise ValueError(f"embedding of {iid!r} has length {v.size}, expected {dim}")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError(f"embedding of {iid!r} has zero norm")
        rows.append(v / norm)
    return np.array(rows)


def dedup(items: Sequence[tuple[str, np.ndarray]], threshold: float) -> set[str]:
    """Keep the lowest id of every component of the cosine >= threshold graph."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if not items:
        return set()
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in dedup input")
    unit = _unit_rows(items)
    sims = unit @ unit.T
    parent = list(range(len(ids)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in zip(*np.nonzero(np.triu(sims >= threshold, k=1))):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    best: dict[int, str] = {}
    for i, iid in enumerate(ids):
        root = find(i)
        if root not in best or iid < best[root]:
            best[root] = iid
    return set(best.values())


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    concept: Optional[str] = None
    negative_score: float = 0.0
    positive_score: float = 0.0


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"embedding lengths differ: {u.size} vs {v.size}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm embedding")
    return float(u @ v) / (nu * nv)


def negative_filter(
    embedding: np.ndarray,
    negatives: Sequence[Concept],
    positives: Sequence[Concept] = (),
    margin: float = 0.0,
) -> FilterVerdict:
    """Drop when some clutter concept beats the best defect concept by more than ``margin``."""
    if not negatives:
        return FilterVerdict(True)
    best_pos = max((_cos(embedding, v) for _, v in positives), default=0.0)
    name, worst = max(((n, _cos(embedding, v)) for n, v in negatives), key=lambda t: (t[1], t[0]))
    if worst > best_pos + margin:
        return FilterVerdict(False, name, worst, best_pos)
    return FilterVerdict(True, None, worst, best_pos)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    passed: bool


@dataclass(frozen=True)
class QualityReport:
    image_id: str
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def reason(self) -> Optional[str]:
        return next((c.name for c in self.checks if not c.passed), None)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "passed": self.passed,
            "reason": self.reason,
            "checks": [{"name": c.name, "value": c.value, "passed": c.passed} for c in self.checks],
        }


def grayscale(image: RasterImage) -> np.ndarray:
    px = image.pixels.astype(np.float64)
    return 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]


def laplacian_variance(image: RasterImage) -> float:
    """Variance of the 4-neighbour Laplacian over interior pixels."""
    g = grayscale(image)
    if g.shape[0] < 3 or g.shape[1] < 3:
        return 0.0
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(lap.var())


def quality_gate(image: RasterImage, cfg: CurationConfig, image_id: str = "") -> QualityReport:
    if image.width < 1 or image.height < 1:
        raise ShapeError("zero-area image")
    side = float(min(image.width, image.height))
    aspect = image.width / image.height
    lo, hi = cfg.aspect_range
    blur = laplacian_variance(image)
    checks = (
        Check("resolution", side, side >= cfg.min_side),
        Check("aspect", aspect, lo <= aspect <= hi),
        Check("blur", blur, blur >= cfg.blur_min_variance),
    )
    return QualityReport(image_id, checks)


@dataclass
class CurationResult:
    kept: list[str] = field(default_factory=list)
    dropped: dict[str, str] = field(default_factory=dict)
    reports: list[QualityReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kept": sorted(self.kept),
            "dropped": [{"id": k, "reason": v} for k, v in sorted(self.dropped.items())],
            "reports": [r.to_dict() for r in self.reports],
        }


def curate(
    images: Iterable[tuple[str, RasterImage]],
    cfg: CurationConfig,
    embed_image: Callable[[RasterImage], np.ndarray],
    embed_text: Callable[[str], np.ndarray],
) -> CurationResult:
    """Deduplicate, then filter clutter, then gate on quality."""
    items = sorted(images, key=lambda t: t[0])
    result = CurationResult()
    vectors = {iid: embed_image(img) for iid, img in items}
    keep = dedup(list(vectors.items()), cfg.dedup_threshold)
    negatives = [(n, embed_text(n)) for n in cfg.negative_concepts]
    positives = [(c.display_name, embed_text(c.display_name)) for c in DefectCategory]
    for iid, img in items:
        report = quality_gate(img, cfg, iid)
        result.reports.append(report)
        if iid not in keep:
            result.dropped[iid] = "duplicate"
            continue
        verdict = negative_filter(vectors[iid], negatives, positives, cfg.negative_margin)
        if not verdict.keep:
            result.dropped[iid] = f"negative concept: {verdict.concept}"
        elif not report.passed:
            result.dropped[iid] = f"quality: {report.reason}"
        else:
            result.kept.append(iid)
    return result


def write_manifest(result: CurationResult, out_dir: "str | Path") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    with open(out / "quality.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "passed", "resolution", "aspect", "blur", "reason", "decision"])
        for r in result.reports:
            vals = {c.name: c.value for c in r.checks}
            decision = "kept" if r.image_id in result.kept else result.dropped.get(r.image_id, "")
            w.writerow([r.image_id, r.passed, vals["resolution"], f"{vals['aspect']:.6f}",
                        f"{vals['blur']:.4f}", r.reason or "", decision])
