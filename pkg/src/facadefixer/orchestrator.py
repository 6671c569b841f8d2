"""Profile interpretation, task planning and checkpointed DAG execution.

The rule-based planner is authoritative. An endpoint planner may propose a
plan, which is accepted only when it passes the same structural checks.

Run directory layout::

    run/plan.json       the executed plan
    run/state.json      per-node status and checkpoint ids, rewritten atomically
    run/artifacts/      content-addressed node outputs (JSON) and images (PNG)
    run/samples/        augmented samples in the dataset sidecar format
    run/report.json     final report
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from . import dataset as ds
from .adjudication import DEFAULT_FALLBACK, CandidateSet, adjudicate, build_request
from .curation import CurationConfig, curate
from .evaluation import GroundTruthItem, detection_metrics, metrics_dict, seg_metrics
from .fusion import ExpertOutput, FusionConfig, crack_mask_union, fuse_intersection, fuse_union
from .gateway import (
    ExpertDescriptor,
    ExpertKind,
    Gateway,
    GatewayError,
    SegmentPrompt,
    prompt_map,
)
from .geometry import BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage, clip_mask_to_boxes, mask_union
from .memory import BackgroundTemplate, MemoryBank, archive_synthetic
from .recomposition import (
    AugmentedSample,
    SampleInstance,
    build_inpaint_job,
    compose,
    decouple,
    plan_placement,
    verify_label_consistency,
)

logger = logging.getLogger(__name__)

TOGGLES = ("detect", "segment", "recompose", "curate", "evaluate")
NODE_KINDS = ("detect", "segment", "inpaint", "retrieve", "compose", "verify", "archive", "evaluate", "curate")
RECOMPOSE_CHAIN = ("inpaint", "retrieve", "compose", "verify", "archive")
# fixed predecessors per node kind; evaluate is resolved per plan
REQUIRES = {
    "detect": (),
    "segment": ("detect",),
    "inpaint": ("segment",),
    "retrieve": ("inpaint",),
    "compose": ("retrieve",),
    "verify": ("compose",),
    "archive": ("verify",),
    "curate": (),
}


class ProfileError(ValueError):
    pass


class PlanError(ValueError):
    pass


class RunInterrupted(RuntimeError):
    """Raised by the kill hook to simulate a crash between nodes."""


class DetectionStrategy(str, enum.Enum):
    UNION = "union"
    INTERSECTION = "intersection"
    ADJUDICATED = "adjudicated"


class PromptPolicy(str, enum.Enum):
    BBOX = "bbox"
    POINTS = "points"
    TEXT = "text"
    ADJUDICATED = "adjudicated"


@dataclass(frozen=True)
class InstructionProfile:
    toggles: frozenset
    categories: tuple[DefectCategory, ...] = tuple(DefectCategory)
    detection_strategy: DetectionStrategy = DetectionStrategy.ADJUDICATED
    segmentation_prompt_policy: PromptPolicy = PromptPolicy.ADJUDICATED
    seed: int = 0

    def __post_init__(self):
        toggles = frozenset(self.toggles)
        if not toggles:
            raise ProfileError("no toggles")
        unknown = sorted(toggles - set(TOGGLES))
        if unknown:
            raise ProfileError(f"unknown toggle: {', '.join(unknown)}")
        cats = tuple(sorted({DefectCategory.parse(c) for c in self.categories}, key=list(DefectCategory).index))
        if not cats:
            raise ProfileError("categories must not be empty")
        object.__setattr__(self, "toggles", toggles)
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "detection_strategy", DetectionStrategy(self.detection_strategy))
        object.__setattr__(self, "segmentation_prompt_policy", PromptPolicy(self.segmentation_prompt_policy))
        object.__setattr__(self, "seed", int(self.seed))

    def to_wire(self) -> dict:
        return {
            "toggles": [t for t in TOGGLES if t in self.toggles],
            "categories": [c.value for c in self.categories],
            "detection_strategy": self.detection_strategy.value,
            "segmentation_prompt_policy": self.segmentation_prompt_policy.value,
            "seed": self.seed,
        }

    @classmethod
    def from_wire(cls, data: dict) -> "InstructionProfile":
        return interpret_profile(data)


DEFAULT_PARAMS = {
    "categories": [c.value for c in DefectCategory],
    "detection_strategy": DetectionStrategy.ADJUDICATED.value,
    "segmentation_prompt_policy": PromptPolicy.ADJUDICATED.value,
    "seed": 0,
}

PROFILE_KEYS = {"toggles", "categories", "detection_strategy", "segmentation_prompt_policy", "seed"}


def interpret_profile(raw: Optional[dict]) -> InstructionProfile:
    """Normalize a raw profile document, filling defaults."""
    raw = dict(raw or {})
    extra = sorted(set(raw) - PROFILE_KEYS)
    if extra:
        raise ProfileError(f"unknown profile fields: {', '.join(extra)}")
    toggles = raw.get("toggles") or []
    if isinstance(toggles, str):
        toggles = [toggles]
    kwargs: dict[str, Any] = {"toggles": frozenset(str(t).strip().lower() for t in toggles)}
    if raw.get("categories"):
        try:
            kwargs["categories"] = tuple(DefectCategory.parse(c) for c in raw["categories"])
        except ValueError as exc:
            raise ProfileError(str(exc)) from exc
    for key, enum_cls in (("detection_strategy", DetectionStrategy), ("segmentation_prompt_policy", PromptPolicy)):
        if key in raw:
            try:
                kwargs[key] = enum_cls(str(raw[key]).lower())
            except ValueError as exc:
                raise ProfileError(f"invalid {key}: {raw[key]!r}") from exc
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return InstructionProfile(**kwargs)


@dataclass(frozen=True)
class PlanNode:
    id: str
    kind: str
    params: dict = field(default_factory=dict, compare=True, hash=False)

    def to_wire(self) -> dict:
        return {"id": self.id, "kind": self.kind, "params": self.params}


@dataclass(frozen=True)
class TaskPlan:
    nodes: tuple[PlanNode, ...]
    edges: tuple[tuple[str, str], ...]
    origin: str = field(default="rules", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(sorted({(a, b) for a, b in self.edges}, key=self._edge_key)))
        validate_plan(self)

    def _edge_key(self, e):
        order = {n.id: i for i, n in enumerate(self.nodes)}
        return (order.get(e[0], -1), order.get(e[1], -1))

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, nid: str) -> PlanNode:
        return next(n for n in self.nodes if n.id == nid)

    def deps(self, nid: str) -> list[str]:
        return [a for a, b in self.edges if b == nid]

    def dependents(self, nid: str) -> set[str]:
        """Transitive successors of ``nid``."""
        out: set[str] = set()
        frontier = [nid]
        while frontier:
            cur = frontier.pop()
            for a, b in self.edges:
                if a == cur and b not in out:
                    out.add(b)
                    frontier.append(b)
        return out

    def to_wire(self) -> dict:
        return {"nodes": [n.to_wire() for n in self.nodes], "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_wire(cls, data: dict, origin: str = "endpoint") -> "TaskPlan":
        try:
            nodes = tuple(PlanNode(str(n["id"]), str(n["kind"]), dict(n.get("params", {}))) for n in data["nodes"])
            edges = tuple((str(a), str(b)) for a, b in data["edges"])
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"malformed plan: {exc}") from exc
        return cls(nodes, edges, origin)


def _topo_order(ids: Sequence[str], edges: Iterable[tuple[str, str]], rank: Callable[[str], Any]) -> list[str]:
    """Kahn's algorithm, always releasing the lowest-ranked ready node first."""
    indeg = {i: 0 for i in ids}
    succ: dict[str, list[str]] = {i: [] for i in ids}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    ready = sorted((i for i in ids if indeg[i] == 0), key=rank)
    order = []
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for nxt in succ[cur]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
        ready.sort(key=rank)
    if len(order) != len(indeg):
        raise PlanError(f"plan has a cycle among {sorted(set(ids) - set(order))}")
    return order


def required_deps(kind: str, present: set[str]) -> set[str]:
    if kind == "evaluate":
        need = {k for k in ("detect", "segment") if k in present}
        return need or {"detect"}
    return set(REQUIRES[kind])


def validate_plan(plan: TaskPlan) -> None:
    ids = [n.id for n in plan.nodes]
    if not ids:
        raise PlanError("plan has no nodes")
    if len(set(ids)) != len(ids):
        raise PlanError(f"duplicate node ids in {ids}")
    for n in plan.nodes:
        if n.kind not in NODE_KINDS:
            raise PlanError(f"unknown node kind {n.kind!r}")
        if n.id != n.kind:
            raise PlanError(f"node id {n.id!r} must equal its kind {n.kind!r}")
    present = set(ids)
    for a, b in plan.edges:
        if a not in present or b not in present:
            raise PlanError(f"edge {a}->{b} references a missing node")
        if a == b:
            raise PlanError(f"self edge on {a}")
    _topo_order(ids, plan.edges, NODE_KINDS.index)
    for n in plan.nodes:
        have = set(plan.deps(n.id))
        for dep in required_deps(n.kind, present):
            if dep not in present:
                raise PlanError(f"{n.id} requires {dep}, which is missing")
            if dep not in have:
                raise PlanError(f"{n.id} must depend on {dep}")


def plan(profile: InstructionProfile) -> TaskPlan:
    """Dependency closure of the toggles, in canonical topological order."""
    wanted: set[str] = set()
    for t in profile.toggles:
        wanted |= set(RECOMPOSE_CHAIN) if t == "recompose" else {t}
    closed = set(wanted)
    frontier = list(wanted)
    while frontier:
        kind = frontier.pop()
        for dep in required_deps(kind, closed):
            if dep not in closed:
                closed.add(dep)
                frontier.append(dep)
    edges = set()
    for kind in closed:
        for dep in required_deps(kind, closed):
            edges.add((dep, kind))
    order = _topo_order(sorted(closed), edges, NODE_KINDS.index)
    base = profile.to_wire()
    params = {k: base[k] for k in ("categories", "detection_strategy", "segmentation_prompt_policy", "seed")}
    nodes = tuple(PlanNode(k, k, dict(params)) for k in order)
    return TaskPlan(nodes, tuple(edges), "rules")


def plan_via_endpoint(
    profile: InstructionProfile,
    descriptor: Optional[ExpertDescriptor],
    gateway: Optional[Gateway],
) -> TaskPlan:
    """Ask an endpoint for a plan; anything that does not validate falls back."""
    fallback = plan(profile)
    if descriptor is None or gateway is None:
        return fallback
    try:
        reply = gateway.post(descriptor, {"task": "plan", "profile": profile.to_wire()})
        proposed = TaskPlan.from_wire(reply if isinstance(reply, dict) else json.loads(reply), "endpoint")
    except (GatewayError, PlanError, ValueError, TypeError) as exc:
        logger.warning("planner %s rejected: %s", descriptor.id, exc)
        return fallback
    if set(proposed.ids) != set(fallback.ids):
        logger.warning("planner %s proposed nodes %s, expected %s", descriptor.id, proposed.ids, fallback.ids)
        return fallback
    return proposed


# -- execution ------------------------------------------------------------


@dataclass
class RunConfig:
    dataset: Path
    fusion: FusionConfig = field(default_factory=FusionConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    dilation_radius: int = 2
    alpha: float = 1.0
    feather: int = 2
    max_workers: int = 4
    fallback: dict = field(default_factory=lambda: dict(DEFAULT_FALLBACK))
    # test hook: raise RunInterrupted right after these nodes are checkpointed
    halt_after: frozenset = frozenset()

    def to_wire(self) -> dict:
        return {
            "fusion": {"iou_threshold": self.fusion.iou_threshold, "min_agreement": self.fusion.min_agreement,
                       "score_rule": self.fusion.score_rule.value},
            "curation": {**{k: getattr(self.curation, k) for k in self.curation.__dataclass_fields__},
                         "aspect_range": list(self.curation.aspect_range),
                         "negative_concepts": list(self.curation.negative_concepts)},
            "dilation_radius": self.dilation_radius,
            "alpha": self.alpha,
            "feather": self.feather,
            "fallback": self.fallback,
        }


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class ArtifactStore:
    """Content-addressed files under ``run/artifacts``."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def put_json(self, obj) -> str:
        data = canonical_json(obj)
        aid = sha256(data)
        path = self.root / f"{aid}.json"
        if not path.exists():
            _atomic_write(path, data)
        return aid

    def get_json(self, aid: str):
        return json.loads((self.root / f"{aid}.json").read_text())

    def put_image(self, image: RasterImage) -> str:
        aid = image.digest()
        path = self.root / f"{aid}.png"
        if not path.exists():
            _atomic_write(path, image.to_png())
        return aid

    def get_image(self, aid: str) -> RasterImage:
        img = RasterImage.load(self.root / f"{aid}.png")
        if img.digest() != aid:
            raise ValueError(f"artifact {aid} is corrupt")
        return img


def _det_wire(d: Detection) -> dict:
    return {"source": d.source, **d.to_dict()}


def _det_from(rec: dict, image_id: str) -> Detection:
    return Detection.from_dict(rec, rec.get("source", "fused"), image_id)


@dataclass
class NodeContext:
    plan: TaskPlan
    gateway: Gateway
    bank: MemoryBank
    config: RunConfig
    store: ArtifactStore
    run_dir: Path
    outputs: dict[str, Any]
    images: list[tuple[ImageRef, RasterImage]]

    @property
    def params(self) -> dict:
        return {**DEFAULT_PARAMS, **self.plan.nodes[0].params}

    def categories(self) -> list[DefectCategory]:
        return [DefectCategory.parse(c) for c in self.params["categories"]]


def _context_text(task: str) -> str:
    return f"Choose the {task} candidate set that best matches the visible facade defects."


def run_detect(ctx: NodeContext) -> dict:
    detectors = ctx.gateway.experts(ExpertKind.DETECTOR)
    if not detectors:
        raise RuntimeError("roster has no detectors")
    judge = ctx.gateway.first(ExpertKind.ADJUDICATOR)
    strategy = DetectionStrategy(ctx.params["detection_strategy"])
    cats = set(ctx.categories())
    per_image = []
    for ref, _ in ctx.images:
        outputs = [ctx.gateway.call_detector(ref, d) for d in detectors]
        union = fuse_union(outputs, ctx.config.fusion)
        inter = fuse_intersection(outputs, ctx.config.fusion)
        verdict = None
        if strategy is DetectionStrategy.UNION:
            chosen = "union"
        elif strategy is DetectionStrategy.INTERSECTION:
            chosen = "intersection"
        else:
            cands = [CandidateSet("union", union), CandidateSet("intersection", inter)]
            cands += [CandidateSet(o.expert, o.detections) for o in outputs]
            req = build_request(ref, cands, _context_text("detection"), "detection")
            v = adjudicate(req, judge, ctx.config.fallback["detection"], ctx.gateway)
            chosen, verdict = v.chosen, v.to_dict()
        pool = {"union": union, "intersection": inter, **{o.expert: list(o.detections) for o in outputs}}
        selected = [d for d in pool[chosen] if d.category in cats]
        per_image.append({
            "image_id": ref.id,
            "union": [_det_wire(d) for d in union],
            "intersection": [_det_wire(d) for d in inter],
            "chosen": chosen,
            "verdict": verdict,
            "selected": [_det_wire(d) for d in selected],
            "warnings": sorted(w for o in outputs for w in o.warnings),
        })
    return {"images": per_image}


def _segment_non_crack(ctx: NodeContext, ref: ImageRef, det: Detection, policy: PromptPolicy, sam, judge):
    box = det.box
    prompts = {
        "bbox-prompt": SegmentPrompt.from_boxes([box]),
        "points-prompt": SegmentPrompt.from_points([(box.x + box.w / 2, box.y + box.h / 2)]),
    }
    concepts = prompt_map(det.category)
    wanted = {PromptPolicy.BBOX: ["bbox-prompt"], PromptPolicy.POINTS: ["points-prompt"],
              PromptPolicy.TEXT: ["text-prompt"]}.get(policy, ["bbox-prompt", "points-prompt", "text-prompt"])
    anchor = box.clamp(ref.width, ref.height)
    masks = {}
    for label in wanted:
        if label == "text-prompt":
            parts = [ctx.gateway.call_segmenter(ref, SegmentPrompt.from_text(c), sam) for c in concepts]
            raw = mask_union(parts)
        else:
            raw = ctx.gateway.call_segmenter(ref, prompts[label], sam)
        # spatial anchor: keep only pixels inside the detector's box
        masks[label] = clip_mask_to_boxes(raw, [anchor]) if anchor else BinaryMask.empty(ref.width, ref.height)
    if len(masks) == 1:
        (label, mask), = masks.items()
        return mask, label, None
    cands = [CandidateSet(k, (m,)) for k, m in masks.items()]
    v = adjudicate(build_request(ref, cands, _context_text("segmentation"), "segmentation"),
                   judge, ctx.config.fallback["segmentation"], ctx.gateway)
    return masks[v.chosen], v.chosen, v.to_dict()


def run_segment(ctx: NodeContext) -> dict:
    sam = ctx.gateway.first(ExpertKind.PROMPTABLE_SEGMENTER)
    crackers = ctx.gateway.experts(ExpertKind.CRACK_SEGMENTER)
    judge = ctx.gateway.first(ExpertKind.ADJUDICATOR)
    policy = PromptPolicy(ctx.params["segmentation_prompt_policy"])
    per_image = []
    for rec in ctx.outputs["detect"]["images"]:
        ref = next(r for r, _ in ctx.images if r.id == rec["image_id"])
        dets = [_det_from(d, ref.id) for d in rec["selected"]]
        crack_mask = None
        if crackers and any(d.category is DefectCategory.CRACK for d in dets):
            crack_mask = crack_mask_union([ExpertOutput(c.id, mask=ctx.gateway.call_segmenter(ref, None, c)) for c in crackers])
        instances = []
        for d in dets:
            anchor = d.box.clamp(ref.width, ref.height)
            if anchor is None:
                continue
            if d.category is DefectCategory.CRACK and crack_mask is not None:
                mask, how, verdict = clip_mask_to_boxes(crack_mask, [anchor]), "crack-union", None
            elif sam is not None:
                mask, how, verdict = _segment_non_crack(ctx, ref, d, policy, sam, judge)
            else:
                raise RuntimeError("roster has no promptable segmenter")
            instances.append({**_det_wire(d), "mask_rle": mask.to_rle(), "prompt": how, "verdict": verdict})
        per_image.append({"image_id": ref.id, "instances": instances})
    return {"images": per_image}


def _instances(ctx: NodeContext, image_id: str) -> list[dict]:
    return next(r["instances"] for r in ctx.outputs["segment"]["images"] if r["image_id"] == image_id)


def _embedder(ctx: NodeContext) -> Callable[[RasterImage], np.ndarray]:
    emb = ctx.gateway.first(ExpertKind.EMBEDDER)
    if emb is None:
        raise RuntimeError("roster has no embedder")
    return lambda img: ctx.gateway.embed(img, emb, dim=ctx.bank.dim)


def _generator(ctx: NodeContext) -> ExpertDescriptor:
    gen = ctx.gateway.first(ExpertKind.GENERATOR)
    if gen is None:
        raise RuntimeError("roster has no generator")
    return gen


def run_inpaint(ctx: NodeContext) -> dict:
    gen, embed = _generator(ctx), _embedder(ctx)
    out = []
    for ref, image in ctx.images:
        masks = [BinaryMask.from_rle(i["mask_rle"]) for i in _instances(ctx, ref.id)]
        if not any(not m.is_empty() for m in masks):
            out.append({"image_id": ref.id, "background": None, "reason": "nothing to decouple"})
            continue
        job = build_inpaint_job(image, masks, ctx.config.dilation_radius, ref.id)
        bg = decouple(job, gen, ctx.gateway, embed, ctx.params["seed"])
        if bg.id not in ctx.bank:
            ctx.bank.insert_background(bg)
        out.append({
            "image_id": ref.id,
            "background": bg.id,
            "image": ctx.store.put_image(bg.image),
            "embedding": ctx.store.put_json([float(x) for x in bg.embedding]),
            "lineage": bg.lineage,
        })
    return {"images": out}


def _background(ctx: NodeContext, rec: dict) -> BackgroundTemplate:
    if rec["background"] in ctx.bank:
        return ctx.bank.get_background(rec["background"])
    emb = np.asarray(ctx.store.get_json(rec["embedding"]), dtype=np.float32)
    return BackgroundTemplate(rec["background"], ctx.store.get_image(rec["image"]), emb, "synthetic", rec["lineage"])


def run_retrieve(ctx: NodeContext) -> dict:
    embed = _embedder(ctx)
    out = []
    for rec in ctx.outputs["inpaint"]["images"]:
        if rec["background"] is None:
            continue
        image = next(img for r, img in ctx.images if r.id == rec["image_id"])
        best: dict[DefectCategory, dict] = {}
        for inst in sorted(_instances(ctx, rec["image_id"]), key=lambda i: (-i["confidence"], i["x"], i["y"])):
            best.setdefault(DefectCategory.parse(inst["category"]), inst)
        for cat in ctx.categories():
            if cat not in best:
                continue
            inst = best[cat]
            region = BoundingBox(inst["x"], inst["y"], inst["w"], inst["h"]).clamp(image.width, image.height)
            entry = ctx.bank.retrieve_compatible_mask(region, cat, embed(image.crop(region))) if region else None
            out.append({
                "image_id": rec["image_id"],
                "category": cat.value,
                "region": region.as_list() if region else None,
                "entry": entry.id if entry else None,
                "reason": None if entry else "no compatible entry",
            })
    return {"retrievals": out}


def run_compose(ctx: NodeContext) -> dict:
    gen = _generator(ctx)
    bgs = {r["image_id"]: r for r in ctx.outputs["inpaint"]["images"]}
    seed = ctx.params["seed"]
    out = []
    for rec in ctx.outputs["retrieve"]["retrievals"]:
        if rec["entry"] is None:
            continue
        bg = _background(ctx, bgs[rec["image_id"]])
        entry = ctx.bank.get(rec["entry"])
        try:
            spec = plan_placement(bg, entry, seed, ctx.config.alpha, ctx.config.feather)
        except ValueError as exc:
            out.append({**rec, "sample": None, "reason": str(exc)})
            continue
        sample = compose(spec, gen, ctx.gateway)
        sid = sample.digest()
        insts = [ds.Instance(i.mask.bbox(), i.category, None, i.mask) for i in sample.instances]
        ds.write_sample(ctx.run_dir / "samples", sid, sample.image, insts)
        out.append({
            **rec,
            "sample": sid,
            "image": ctx.store.put_image(sample.image),
            "background": bg.id,
            "instances": [{"mask_rle": i.mask.to_rle(), "category": i.category.value, "text": i.text,
                           "source_entry": i.source_entry} for i in sample.instances],
            "lineage": sample.lineage,
        })
    return {"samples": out}


def _sample(ctx: NodeContext, rec: dict) -> AugmentedSample:
    insts = tuple(SampleInstance(BinaryMask.from_rle(i["mask_rle"]), DefectCategory.parse(i["category"]),
                                 i["text"], i["source_entry"]) for i in rec["instances"])
    return AugmentedSample(ctx.store.get_image(rec["image"]), insts, rec["lineage"])


def run_verify(ctx: NodeContext) -> dict:
    bgs = {r["image_id"]: r for r in ctx.outputs["inpaint"]["images"]}
    out = []
    for rec in ctx.outputs["compose"]["samples"]:
        if rec["sample"] is None:
            continue
        report = verify_label_consistency(_sample(ctx, rec), _background(ctx, bgs[rec["image_id"]]), ctx.config.feather)
        out.append({"sample": rec["sample"], **report.to_dict()})
    return {"reports": out}


def run_archive(ctx: NodeContext) -> dict:
    ok = {r["sample"] for r in ctx.outputs["verify"]["reports"] if r["consistent"]}
    archived = []
    for rec in ctx.outputs["compose"]["samples"]:
        if rec["sample"] in ok:
            ids = archive_synthetic(_sample(ctx, rec), ctx.bank, skip_existing=True)
            archived.append({"sample": rec["sample"], "entries": ids})
    return {"archived": archived, "rejected": sorted({r["sample"] for r in ctx.outputs["verify"]["reports"]} - ok)}


def run_evaluate(ctx: NodeContext) -> dict:
    gts, pred_dets = [], []
    seg_rows = []
    has_gt = False
    for ref, _ in ctx.images:
        sidecar = Path(ctx.config.dataset) / f"{ref.id}.json"
        if not sidecar.exists():
            continue
        has_gt = True
        ann = ds.read_sidecar(sidecar)
        gts += [GroundTruthItem(ref.id, i.box, i.category, i.mask) for i in ann.instances]
        if "detect" in ctx.outputs:
            rec = next(r for r in ctx.outputs["detect"]["images"] if r["image_id"] == ref.id)
            pred_dets += [_det_from(d, ref.id) for d in rec["selected"]]
        if "segment" in ctx.outputs:
            pred = _category_masks([(DefectCategory.parse(i["category"]), BinaryMask.from_rle(i["mask_rle"]))
                                    for i in _instances(ctx, ref.id)], ref)
            gt = _category_masks([(i.category, i.mask) for i in ann.instances if i.mask is not None], ref)
            seg_rows.append(seg_metrics(pred, gt))
    if not has_gt:
        return {"detection": None, "segmentation": None, "note": "no ground truth sidecars"}
    result: dict = {"detection": None, "segmentation": None}
    if "detect" in ctx.outputs:
        result["detection"] = metrics_dict(detection_metrics(pred_dets, gts))
    if seg_rows:
        keys = ("miou", "precision", "recall", "f1", "pixel_accuracy")
        result["segmentation"] = {k: float(np.mean([getattr(r, k) for r in seg_rows])) for k in keys}
    return result


def _category_masks(pairs, ref: ImageRef) -> dict:
    grouped: dict[DefectCategory, list[BinaryMask]] = {}
    for cat, m in pairs:
        grouped.setdefault(cat, []).append(m)
    if not grouped:
        return {DefectCategory.CRACK: BinaryMask.empty(ref.width, ref.height)}
    return {c: mask_union(ms) for c, ms in grouped.items()}


def run_curate(ctx: NodeContext) -> dict:
    emb = ctx.gateway.first(ExpertKind.EMBEDDER)
    if emb is None:
        raise RuntimeError("roster has no embedder")
    dim = int(emb.params.get("dim", 512))
    result = curate(
        [(r.id, img) for r, img in ctx.images],
        ctx.config.curation,
        lambda img: ctx.gateway.embed(img, emb, dim=dim),
        lambda text: ctx.gateway.embed(text, emb, dim=dim),
    )
    return result.to_dict()


RUNNERS: dict[str, Callable[[NodeContext], dict]] = {
    "detect": run_detect,
    "segment": run_segment,
    "inpaint": run_inpaint,
    "retrieve": run_retrieve,
    "compose": run_compose,
    "verify": run_verify,
    "archive": run_archive,
    "evaluate": run_evaluate,
    "curate": run_curate,
}


@dataclass
class RunReport:
    plan: dict
    seed: int
    config_digest: str
    status: dict[str, str]
    errors: dict[str, str]
    artifacts: dict[str, Optional[str]]
    summary: dict[str, Any]
    timings: dict[str, dict] = field(default_factory=dict)

    def comparable(self) -> dict:
        d = self.to_dict()
        d.pop("timings")
        return d

    def digest(self) -> str:
        return sha256(canonical_json(self.comparable()))

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "status": self.status,
            "errors": self.errors,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "timings": self.timings,
        }


def _summary(nid: str, out: dict) -> dict:
    if nid in ("detect", "segment"):
        key = "selected" if nid == "detect" else "instances"
        return {"images": len(out["images"]), "instances": sum(len(r[key]) for r in out["images"])}
    if nid == "inpaint":
        return {"backgrounds": sorted(r["background"] for r in out["images"] if r["background"])}
    if nid == "retrieve":
        return {"entries": [r["entry"] for r in out["retrievals"]]}
    if nid == "compose":
        return {"samples": [r["sample"] for r in out["samples"] if r["sample"]]}
    if nid == "verify":
        return {"consistent": sum(r["consistent"] for r in out["reports"]), "total": len(out["reports"])}
    if nid == "archive":
        return {"entries": sorted(e for a in out["archived"] for e in a["entries"])}
    if nid == "curate":
        return {"kept": out["kept"], "dropped": len(out["dropped"])}
    return out


def config_digest(plan_: TaskPlan, gateway: Gateway, config: RunConfig) -> str:
    roster = [gateway.roster[k].to_dict() for k in sorted(gateway.roster)]
    return sha256(canonical_json({"plan": plan_.to_wire(), "roster": roster, "config": config.to_wire()}))


def load_images(directory: Path) -> list[tuple[ImageRef, RasterImage]]:
    out = []
    for iid in ds.image_ids(directory):
        img, ref = ds.load_image(directory, iid)
        out.append((ImageRef(iid, "", ref.width, ref.height, ref.checksum), img))
    return out


def execute(
    plan_: TaskPlan,
    gateway: Gateway,
    bank: MemoryBank,
    config: RunConfig,
    run_dir: "str | Path",
    resume: bool = True,
) -> RunReport:
    """Run the plan, checkpointing each node before it is marked done.

    With ``resume`` a node already recorded as done in ``state.json`` is
    restored from its checkpoint instead of being executed again.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    store = ArtifactStore(run_dir / "artifacts")
    digest = config_digest(plan_, gateway, config)
    (run_dir / "plan.json").write_text(json.dumps(plan_.to_wire(), indent=2, sort_keys=True))

    state_path = run_dir / "state.json"
    state: dict = {"config_digest": digest, "nodes": {n: {"status": "pending"} for n in plan_.ids}}
    if resume and state_path.exists():
        prior = json.loads(state_path.read_text())
        if prior.get("config_digest") == digest:
            for nid, rec in prior["nodes"].items():
                if nid in state["nodes"] and rec.get("status") == "done":
                    state["nodes"][nid] = {"status": "done", "checkpoint": rec["checkpoint"], "resumed": True}
        else:
            logger.warning("state.json belongs to a different configuration; starting over")

    lock = threading.Lock()

    def save_state():
        _atomic_write(state_path, json.dumps(state, indent=2, sort_keys=True).encode())

    outputs: dict[str, Any] = {}
    for nid, rec in state["nodes"].items():
        if rec["status"] == "done":
            outputs[nid] = store.get_json(rec["checkpoint"])
    save_state()

    ctx = NodeContext(plan_, gateway, bank, config, store, run_dir, outputs, load_images(Path(config.dataset)))
    timings: dict[str, dict] = {}
    t0 = time.monotonic()
    errors: dict[str, str] = {}

    def status(nid):
        return state["nodes"][nid]["status"]

    def ready(nid):
        return status(nid) == "pending" and all(status(d) == "done" for d in plan_.deps(nid))

    def body(nid):
        start = time.monotonic() - t0
        out = RUNNERS[plan_.node(nid).kind](ctx)
        return out, start, time.monotonic() - t0

    interrupted = None
    with ThreadPoolExecutor(max_workers=max(1, config.max_workers)) as pool:
        running: dict[Future, str] = {}
        while True:
            if interrupted is None:
                for nid in plan_.ids:
                    if ready(nid) and nid not in running.values():
                        with lock:
                            state["nodes"][nid]["status"] = "running"
                        running[pool.submit(body, nid)] = nid
            if not running:
                break
            done, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: plan_.ids.index(running[f])):
                nid = running.pop(fut)
                with lock:
                    try:
                        out, start, end = fut.result()
                    except Exception as exc:  # node failures are data, not crashes
                        logger.warning("node %s failed: %s", nid, exc)
                        errors[nid] = f"{type(exc).__name__}: {exc}"
                        state["nodes"][nid] = {"status": "failed", "error": errors[nid]}
                        for dep in plan_.dependents(nid):
                            if state["nodes"][dep]["status"] == "pending":
                                state["nodes"][dep] = {"status": "skipped", "reason": f"{nid} failed"}
                        save_state()
                        continue
                    cid = store.put_json(out)
                    outputs[nid] = out
                    timings[nid] = {"start": round(start, 6), "end": round(end, 6)}
                    state["nodes"][nid] = {"status": "done", "checkpoint": cid}
                    save_state()
                    if nid in config.halt_after:
                        interrupted = nid
        if interrupted is not None:
            raise RunInterrupted(f"halted after {interrupted}")

    report = RunReport(
        plan=plan_.to_wire(),
        seed=int(plan_.nodes[0].params.get("seed", 0)),
        config_digest=digest,
        status={n: state["nodes"][n]["status"] for n in plan_.ids},
        errors=errors,
        artifacts={n: state["nodes"][n].get("checkpoint") for n in plan_.ids},
        summary={n: _summary(n, outputs[n]) for n in plan_.ids if n in outputs},
        timings={n: {**timings[n], "resumed": False} if n in timings else {"resumed": True}
                 for n in plan_.ids if state["nodes"][n]["status"] == "done"},
    )
    (run_dir / "report.json").write_text(json.dumps({**report.to_dict(), "digest": report.digest()}, indent=2, sort_keys=True))
    return report
