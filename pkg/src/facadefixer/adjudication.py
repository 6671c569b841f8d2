"""Selection of one candidate output among competing expert hypotheses.

A request bundles the image, a contextual prompt and several labelled
candidate sets (e.g. ``union``, ``intersection``, or one per prompt mode).
An adjudicator endpoint picks one label. Every failure path ends in a
declared fallback label, so the pipeline never blocks on the endpoint.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from typing import Collection, Optional, Sequence, Union

import numpy as np

from .gateway import ExpertDescriptor, Gateway, GatewayError, image_wire
from .geometry import (
    BinaryMask,
    DefectCategory,
    Detection,
    ImageRef,
    box_iou,
    mask_iou,
    mask_union,
)

logger = logging.getLogger(__name__)

Payload = Union[Detection, BinaryMask]

DEFAULT_FALLBACK = {"detection": "intersection", "segmentation": "bbox-prompt"}

GLOSSARY = {
    DefectCategory.CRACK: "linear fracture lines in render or concrete",
    DefectCategory.SPALLING: "surface material broken away, exposing holes or rebar",
    DefectCategory.RUST_STAIN: "brown-orange discolouration from corroding metal",
    DefectCategory.DEGRADED_PLASTER: "peeling, flaking or blistered plaster coating",
    DefectCategory.VEGETATION: "plants or moss growing on the facade",
    DefectCategory.CONTAMINANT: "rubbish, droppings or foreign objects stuck to the surface",
}


class Task(str, enum.Enum):
    DETECTION = "detection"
    SEGMENTATION = "segmentation"


class VerdictSource(str, enum.Enum):
    ENDPOINT = "endpoint"
    FALLBACK = "fallback"
    BYPASS = "bypass"
    MOCK = "mock"


class VerdictParseError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    label: str
    payload: tuple[Payload, ...]

    def __post_init__(self):
        object.__setattr__(self, "payload", tuple(self.payload))
        if self.kind is None and self.payload:
            raise ValueError(f"candidate {self.label!r} mixes detections and masks")

    @property
    def kind(self) -> Optional[str]:
        if not self.payload:
            return "empty"
        if all(isinstance(p, Detection) for p in self.payload):
            return "detections"
        if all(isinstance(p, BinaryMask) for p in self.payload):
            return "mask"
        return None

    def summary(self) -> dict:
        confs = [p.confidence for p in self.payload if isinstance(p, Detection)]
        return {"count": len(self.payload), "mean_confidence": float(np.mean(confs)) if confs else None}

    def to_wire(self) -> dict:
        rec: dict = {"label": self.label, "summary": self.summary()}
        if self.kind == "mask":
            rec["mask_rle"] = mask_union(list(self.payload)).to_rle()
        else:
            rec["detections"] = [p.to_dict() for p in self.payload]
        return rec


@dataclass(frozen=True)
class AdjudicationRequest:
    image: ImageRef
    candidates: tuple[CandidateSet, ...]
    context: str
    task: Task

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ValueError("an adjudication request needs at least one candidate")
        if not self.context.strip():
            raise ValueError("adjudication context must not be empty")
        labels = [c.label for c in self.candidates]
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate candidate labels: {labels}")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.candidates]

    def to_wire(self) -> dict:
        return {
            "task": "adjudicate",
            "kind": self.task.value,
            "image": image_wire(self.image),
            "context": self.context,
            "candidates": [c.to_wire() for c in self.candidates],
        }

    @classmethod
    def from_wire(cls, body: dict) -> "AdjudicationRequest":
        img = body["image"]
        image = ImageRef(str(img["id"]), str(img.get("uri", "")), int(img["width"]), int(img["height"]), img.get("checksum"))
        cands = []
        for rec in body["candidates"]:
            label = str(rec["label"])
            if "mask_rle" in rec:
                payload: tuple = (BinaryMask.from_rle(rec["mask_rle"]),)
            else:
                payload = tuple(Detection.from_dict(d, label, image.id) for d in rec.get("detections", []))
            cands.append(CandidateSet(label, payload))
        return cls(image, tuple(cands), str(body["context"]), Task(body.get("kind", "detection")))


@dataclass(frozen=True)
class Verdict:
    chosen: str
    rationale: str
    source: VerdictSource

    def to_dict(self) -> dict:
        return {"chosen": self.chosen, "rationale": self.rationale, "source": self.source.value}


def glossary_text(categories: Optional[Collection[DefectCategory]] = None) -> str:
    cats = categories or list(DefectCategory)
    lines = [f"- {c.display_name}: {GLOSSARY[c]}" for c in cats]
    return "Defect categories:\n" + "\n".join(lines)


def build_request(
    image: ImageRef,
    candidates: Sequence[CandidateSet],
    context: str,
    task: "Task | str | None" = None,
) -> AdjudicationRequest:
    if not candidates:
        raise ValueError("build_request needs at least one candidate")
    kinds = {c.kind for c in candidates} - {"empty"}
    if len(kinds) > 1:
        raise ValueError(f"candidates mix payload kinds: {sorted(kinds)}")
    if task is None:
        task = Task.SEGMENTATION if kinds == {"mask"} else Task.DETECTION
    full_context = f"{context.strip()}\n\n{glossary_text()}"
    return AdjudicationRequest(image, tuple(candidates), full_context, Task(task))


def _verdict_records(raw: str):
    try:
        whole = json.loads(raw)
    except ValueError:
        whole = None
    if whole is not None:
        yield whole
        return
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
            yield obj
        except ValueError:
            pass
        pos = raw.find("{", pos + 1)


def parse_verdict(raw: str, labels: Collection[str]) -> Verdict:
    """First well-formed ``{"chosen": ..., "rationale": ...}`` record in ``raw``."""
    if not raw or not raw.strip():
        raise VerdictParseError("empty adjudicator reply")
    for rec in _verdict_records(raw):
        if not isinstance(rec, dict) or not isinstance(rec.get("chosen"), str):
            continue
        chosen = rec["chosen"]
        if chosen not in labels:
            raise VerdictParseError(f"adjudicator chose unknown label {chosen!r}")
        rationale = rec.get("rationale", "")
        return Verdict(chosen, rationale if isinstance(rationale, str) else json.dumps(rationale), VerdictSource.ENDPOINT)
    raise VerdictParseError("no verdict record in adjudicator reply")


def adjudicate(
    request: AdjudicationRequest,
    endpoint: Optional[ExpertDescriptor],
    fallback_label: str,
    gateway: Optional[Gateway] = None,
) -> Verdict:
    """Ask the endpoint for a verdict; at most two calls, then the fallback."""
    labels = request.labels
    if fallback_label not in labels:
        raise ValueError(f"fallback label {fallback_label!r} is not among {labels}")
    if len(labels) == 1:
        return Verdict(labels[0], "single candidate", VerdictSource.BYPASS)
    if endpoint is None or gateway is None:
        return Verdict(fallback_label, "no adjudicator configured", VerdictSource.FALLBACK)

    body = request.to_wire()
    last_error = "not attempted"
    for _attempt in range(2):
        try:
            raw = gateway.call_adjudicator(body, endpoint, retry=False)
            verdict = parse_verdict(raw, labels)
        except (GatewayError, VerdictParseError) as exc:
            last_error = str(exc)
            logger.warning("adjudicator %s failed: %s", endpoint.id, exc)
            continue
        source = VerdictSource.MOCK if endpoint.is_mock else VerdictSource.ENDPOINT
        return Verdict(verdict.chosen, verdict.rationale, source)
    return Verdict(fallback_label, f"fallback after endpoint failure: {last_error}", VerdictSource.FALLBACK)


def _element_iou(a: Payload, b: Payload) -> float:
    if isinstance(a, Detection) and isinstance(b, Detection):
        return box_iou(a.box, b.box) if a.category is b.category else 0.0
    if isinstance(a, BinaryMask) and isinstance(b, BinaryMask):
        return mask_iou(a, b)
    return 0.0


def _agreement(c: CandidateSet, other: CandidateSet) -> float:
    if not c.payload or not other.payload:
        return 0.0
    return float(np.mean([max(_element_iou(e, f) for f in other.payload) for e in c.payload]))


def agreement_scores(request: AdjudicationRequest) -> dict[str, float]:
    scores = {}
    for c in request.candidates:
        others = [o for o in request.candidates if o.label != c.label]
        scores[c.label] = float(np.mean([_agreement(c, o) for o in others])) if others else 1.0
    return scores


def mock_adjudicate(request: AdjudicationRequest) -> Verdict:
    """Pick the candidate that agrees most with its peers; ties go to the smallest label."""
    scores = agreement_scores(request)
    chosen = min(scores, key=lambda label: (-round(scores[label], 12), label))
    return Verdict(chosen, f"mean peer agreement {scores[chosen]:.4f}", VerdictSource.MOCK)
