"""Generative recomposition: clean a facade, then paste remembered defects back.

The cycle runs inpaint -> retrieve -> place -> compose -> verify -> archive.
Only samples whose pixel changes stay inside their declared masks are
archived, so every synthetic label is exact by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .gateway import ExpertDescriptor, ExpertKind, Gateway, GatewayError, GeneratorRequest
from .geometry import (
    BinaryMask,
    BoundingBox,
    DefectCategory,
    Detection,
    RasterImage,
    dilate,
    dilate_array,
    mask_union,
)
from .memory import BackgroundTemplate, MemoryBank, MemoryEntry, archive_synthetic
from .mocks import alpha_blend, encode_png, rng_for

logger = logging.getLogger(__name__)

PLACEMENT_MARGIN = 0.05
MIN_COVERAGE = 0.1

Embedder = Callable[[RasterImage], np.ndarray]


@dataclass(frozen=True, eq=False)
class InpaintJob:
    image: RasterImage
    image_id: str
    hole_mask: BinaryMask
    dilation_radius: int

    def __post_init__(self):
        if self.hole_mask.is_empty():
            raise ValueError("inpaint job has an empty hole mask")
        if self.hole_mask.shape != (self.image.height, self.image.width):
            raise ValueError("hole mask does not match the image size")


@dataclass(frozen=True, eq=False)
class BlendSpec:
    background: BackgroundTemplate
    entry: MemoryEntry
    placement: BoundingBox
    alpha: float = 1.0
    feather: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.feather < 0:
            raise ValueError(f"feather must be >= 0, got {self.feather}")
        if not self.placement.within(self.background.image.width, self.background.image.height):
            raise ValueError(f"placement {self.placement} leaves the background")


@dataclass(frozen=True, eq=False)
class SampleInstance:
    mask: BinaryMask
    category: DefectCategory
    text: str = ""
    source_entry: Optional[str] = None


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    image: RasterImage
    instances: tuple[SampleInstance, ...]
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.mask.shape != (self.image.height, self.image.width):
                raise ValueError("instance mask does not match the sample image")

    def digest(self) -> str:
        from .memory import content_id

        parts = [self.image.digest()]
        for inst in self.instances:
            parts += [str(inst.mask.counts), inst.category.value, inst.text, str(inst.source_entry)]
        return content_id("s", *parts)


@dataclass(frozen=True)
class ConsistencyReport:
    consistent: bool
    leakage_px: int
    coverage: float
    per_instance: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "consistent": self.consistent,
            "leakage_px": self.leakage_px,
            "coverage": self.coverage,
            "per_instance": list(self.per_instance),
        }


def build_inpaint_job(
    image: RasterImage,
    masks: Sequence[BinaryMask],
    radius: int,
    image_id: str = "image",
) -> InpaintJob:
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    masks = [m for m in masks if not m.is_empty()]
    if not masks:
        raise ValueError("nothing to decouple: no instance masks")
    hole = dilate(mask_union(masks), radius)
    return InpaintJob(image, image_id, hole, radius)


def decouple(
    job: InpaintJob,
    generator: ExpertDescriptor,
    gateway: Gateway,
    embed: Embedder,
    seed: int = 0,
) -> BackgroundTemplate:
    """Inpaint the hole and wrap the result as a background template."""
    req = GeneratorRequest(
        "inpaint", job.image, job.image_id, job.hole_mask, seed,
        params={"dilation_radius": job.dilation_radius},
    )
    clean = gateway.call_generator(req, generator)
    lineage = {"source_image": job.image_id, "generator": generator.id, "dilation_radius": job.dilation_radius}
    return BackgroundTemplate.create(clean, embed(clean), "synthetic", lineage)


def margin_rect(width: int, height: int, margin: float = PLACEMENT_MARGIN) -> tuple[int, int, int, int]:
    mx, my = math.ceil(margin * width), math.ceil(margin * height)
    return mx, my, width - mx, height - my


def plan_placement(
    background: BackgroundTemplate,
    entry: MemoryEntry,
    seed: int,
    alpha: float = 1.0,
    feather: int = 0,
) -> BlendSpec:
    """Seeded placement of the scaled entry crop inside the margin rectangle."""
    x0, y0, x1, y1 = margin_rect(background.image.width, background.image.height)
    cw, ch = entry.crop.width, entry.crop.height
    if x1 <= x0 or y1 <= y0:
        raise ValueError("background too small for any placement")
    s_max = min(1.0, (x1 - x0) / cw, (y1 - y0) / ch)
    if s_max < 0.5:
        raise ValueError(
            f"entry {entry.id!r} ({cw}x{ch}) does not fit background {background.id!r} at half scale"
        )
    rng = rng_for("placement", background.id, entry.id, seed)
    s = float(rng.uniform(0.5, s_max))
    pw = min(x1 - x0, math.ceil(s * cw))
    ph = min(y1 - y0, math.ceil(s * ch))
    px = int(rng.integers(x0, x1 - pw + 1))
    py = int(rng.integers(y0, y1 - ph + 1))
    return BlendSpec(background, entry, BoundingBox(px, py, pw, ph), alpha, feather, seed)


def scale_entry(entry: MemoryEntry, width: int, height: int) -> tuple[RasterImage, np.ndarray]:
    """Bilinear crop and nearest-neighbour mask at the requested size."""
    crop = Image.fromarray(entry.crop.pixels, mode="RGB").resize((width, height), Image.BILINEAR)
    mask = Image.fromarray(entry.mask.array.astype(np.uint8) * 255, mode="L").resize((width, height), Image.NEAREST)
    return RasterImage.from_array(np.asarray(crop)), np.asarray(mask) > 127


def compose(spec: BlendSpec, generator: Optional[ExpertDescriptor], gateway: Gateway) -> AugmentedSample:
    bg = spec.background.image
    x0, y0, x1, y1 = spec.placement.pixel_span()
    crop, local = scale_entry(spec.entry, x1 - x0, y1 - y0)
    frame = np.zeros((bg.height, bg.width), dtype=bool)
    frame[y0:y1, x0:x1] = local
    mask = BinaryMask.from_array(frame)
    lineage = {
        "background": spec.background.id,
        "entries": [spec.entry.id],
        "seed": spec.seed,
        "placement": spec.placement.as_list(),
        "alpha": spec.alpha,
        "feather": spec.feather,
        "notes": [],
    }
    if mask.is_empty():
        lineage["notes"].append("empty entry mask; background unchanged")
        return AugmentedSample(bg, (), lineage)

    params = {"crop": encode_png(crop), "placement": spec.placement.as_list(), "alpha": spec.alpha, "feather": spec.feather}
    out = None
    if generator is not None:
        req = GeneratorRequest("compose", bg, spec.background.id, mask, spec.seed,
                               spec.entry.category, spec.entry.text, params)
        try:
            out = gateway.call_generator(req, generator)
            lineage["generator"] = generator.id
        except GatewayError as exc:
            logger.warning("compose via %s failed, blending locally: %s", generator.id, exc)
            lineage["notes"].append(f"generator failed ({exc}); local alpha blend")
    if out is None:
        out = alpha_blend(bg, crop, spec.placement, mask, spec.alpha, spec.feather)
        lineage["generator"] = "local-blend"
    inst = SampleInstance(mask, spec.entry.category, spec.entry.text, spec.entry.id)
    return AugmentedSample(out, (inst,), lineage)


def verify_label_consistency(
    sample: AugmentedSample,
    background: "BackgroundTemplate | RasterImage",
    feather: int,
    min_coverage: float = MIN_COVERAGE,
) -> ConsistencyReport:
    """Pixel changes must stay within the feathered masks and cover each mask."""
    base = background.image if isinstance(background, BackgroundTemplate) else background
    if (base.width, base.height) != (sample.image.width, sample.image.height):
        raise ValueError("sample and background differ in size")
    changed = np.any(sample.image.pixels != base.pixels, axis=2)
    union = np.zeros_like(changed)
    for inst in sample.instances:
        union |= inst.mask.array
    allowed = dilate_array(union, feather) if feather > 0 else union
    leakage = int(np.count_nonzero(changed & ~allowed))
    per = []
    for inst in sample.instances:
        area = inst.mask.area
        per.append(float(np.count_nonzero(changed & inst.mask.array)) / area if area else 0.0)
    coverage = min(per) if per else 1.0
    ok = leakage == 0 and all(c >= min_coverage for c in per)
    return ConsistencyReport(ok, leakage, coverage, tuple(per))


@dataclass
class CycleResult:
    samples: list[AugmentedSample] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    background: Optional[BackgroundTemplate] = None
    archived: list[str] = field(default_factory=list)


def _regions(detections: Sequence[Detection], categories: Optional[Sequence[DefectCategory]]):
    best: dict[DefectCategory, Detection] = {}
    for d in sorted(detections, key=lambda d: (-d.confidence, d.box.x, d.box.y, d.box.w, d.box.h)):
        best.setdefault(d.category, d)
    wanted = sorted(best, key=lambda c: c.value) if categories is None else [DefectCategory.parse(c) for c in categories]
    return [(c, best.get(c)) for c in wanted]


def recompose_cycle(
    image: RasterImage,
    detections: Sequence[Detection],
    masks: Sequence[BinaryMask],
    bank: MemoryBank,
    gateway: Gateway,
    seed: int,
    image_id: str = "image",
    categories: Optional[Sequence[DefectCategory]] = None,
    radius: int = 2,
    alpha: float = 1.0,
    feather: int = 2,
) -> CycleResult:
    """One full synthesis pass over a perceived image.

    Stage errors are recorded per category; the cycle carries on with the
    remaining categories.
    """
    result = CycleResult()
    generator = gateway.first(ExpertKind.GENERATOR)
    embedder = gateway.first(ExpertKind.EMBEDDER)
    if generator is None or embedder is None:
        result.records.append({"stage": "setup", "status": "failed", "reason": "roster lacks a generator or embedder"})
        return result

    def embed(img: RasterImage) -> np.ndarray:
        return gateway.embed(img, embedder, dim=bank.dim)

    try:
        job = build_inpaint_job(image, masks, radius, image_id)
        bg = decouple(job, generator, gateway, embed, seed)
    except (ValueError, GatewayError) as exc:
        result.records.append({"stage": "inpaint", "status": "failed", "reason": str(exc)})
        return result
    result.background = bg
    if bg.id not in bank:
        bank.insert_background(bg)

    for category, det in _regions(detections, categories):
        rec: dict = {"category": category.value}
        result.records.append(rec)
        if det is None:
            rec.update(status="skipped", reason="category not detected")
            continue
        try:
            region = det.box.clamp(image.width, image.height)
            if region is None:
                raise ValueError("detection region lies outside the image")
            entry = bank.retrieve_compatible_mask(region, category, embed(image.crop(region)))
            if entry is None:
                rec.update(status="skipped", reason="no compatible entry")
                continue
            spec = plan_placement(bg, entry, seed, alpha, feather)
            sample = compose(spec, generator, gateway)
            report = verify_label_consistency(sample, bg, feather)
        except (ValueError, GatewayError) as exc:
            rec.update(status="failed", reason=str(exc))
            continue
        result.samples.append(sample)
        rec.update(entry=entry.id, sample=sample.digest(), consistency=report.to_dict())
        if report.consistent and sample.instances:
            ids = archive_synthetic(sample, bank, skip_existing=True)
            result.archived.extend(ids)
            rec.update(status="archived", archived=ids)
        else:
            rec.update(status="rejected", reason="label consistency check failed")
    return result
