"""Uniform wire clients for external experts.

Every expert (detector, crack segmenter, promptable segmenter, generator,
adjudicator, embedder) is reached through one JSON request body whose
``task`` field selects the operation. An endpoint is either an HTTP URL, a
deterministic in-process mock written ``mock:<seed>``, or ``disabled``.

Replies are validated before they are converted into core types, so no
out-of-frame box or mis-sized mask ever leaves this module.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import httpx
import numpy as np
import yaml

from . import mocks
from .fusion import ExpertOutput
from .geometry import BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Base class for expert invocation failures."""


class TransportError(GatewayError):
    """Endpoint unreachable, timed out, or answered with an HTTP error."""


class ProtocolError(GatewayError):
    """Endpoint answered, but the reply violates the wire schema."""


class UsageError(GatewayError):
    """The caller asked an expert for something its kind cannot do."""


class ExpertKind(str, enum.Enum):
    DETECTOR = "detector"
    CRACK_SEGMENTER = "crack_segmenter"
    PROMPTABLE_SEGMENTER = "promptable_segmenter"
    GENERATOR = "generator"
    ADJUDICATOR = "adjudicator"
    EMBEDDER = "embedder"


@dataclass(frozen=True)
class ExpertDescriptor:
    id: str
    kind: ExpertKind
    endpoint: str
    timeout: int = 30_000  # milliseconds
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ExpertKind(self.kind))
        if self.timeout <= 0:
            raise ValueError(f"expert {self.id!r}: timeout must be positive")

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith("mock:")

    @property
    def is_disabled(self) -> bool:
        return self.endpoint in ("disabled", "off", "")

    @property
    def mock_seed(self) -> int:
        return int(self.endpoint.split(":", 1)[1] or 0)

    @classmethod
    def from_dict(cls, data: dict) -> "ExpertDescriptor":
        return cls(
            id=str(data["id"]),
            kind=ExpertKind(data["kind"]),
            endpoint=str(data.get("endpoint", "disabled")),
            timeout=int(data.get("timeout", data.get("timeout_ms", 30_000))),
            params=dict(data.get("params") or {}),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "endpoint": self.endpoint,
            "timeout": self.timeout,
            "params": self.params,
        }


def load_roster(path: "str | Path") -> list[ExpertDescriptor]:
    """Read an experts file (JSON or YAML) holding ``{"experts": [...]}``."""
    data = yaml.safe_load(Path(path).read_text())
    entries = data.get("experts", data) if isinstance(data, dict) else data
    roster = [ExpertDescriptor.from_dict(e) for e in entries]
    ids = [d.id for d in roster]
    if len(ids) != len(set(ids)):
        raise ValueError(f"duplicate expert ids in {path}")
    return roster


def mock_roster(seed: int = 0, dim: int = 512) -> list[ExpertDescriptor]:
    """A complete all-mock roster: three detectors, two crack segmenters and one of each other kind."""
    return [
        ExpertDescriptor("det-a", ExpertKind.DETECTOR, f"mock:{seed + 1}"),
        ExpertDescriptor("det-b", ExpertKind.DETECTOR, f"mock:{seed + 2}"),
        ExpertDescriptor("det-c", ExpertKind.DETECTOR, f"mock:{seed + 3}"),
        ExpertDescriptor("crack-a", ExpertKind.CRACK_SEGMENTER, f"mock:{seed + 11}"),
        ExpertDescriptor("crack-b", ExpertKind.CRACK_SEGMENTER, f"mock:{seed + 12}"),
        ExpertDescriptor("sam", ExpertKind.PROMPTABLE_SEGMENTER, f"mock:{seed + 21}"),
        ExpertDescriptor("gen", ExpertKind.GENERATOR, f"mock:{seed + 31}"),
        ExpertDescriptor("judge", ExpertKind.ADJUDICATOR, f"mock:{seed + 41}"),
        ExpertDescriptor("clip", ExpertKind.EMBEDDER, f"mock:{seed + 51}", params={"dim": dim}),
    ]


# ---------------------------------------------------------------------------
# Semantic prompt mapping

_PROMPT_MAP: dict[DefectCategory, tuple[str, ...]] = {
    DefectCategory.VEGETATION: ("plant",),
    DefectCategory.CONTAMINANT: ("rubbish",),
    DefectCategory.DEGRADED_PLASTER: ("peeling",),
    DefectCategory.RUST_STAIN: ("stain",),
    DefectCategory.SPALLING: ("hole", "peeling", "stain"),
    # cracks go to the dedicated crack segmenters rather than text prompts
    DefectCategory.CRACK: ("crack",),
}


def prompt_map(category: "DefectCategory | str") -> list[str]:
    """Visually descriptive concepts to prompt a segmenter with for ``category``."""
    return list(_PROMPT_MAP[DefectCategory.parse(category)])


class PromptMode(str, enum.Enum):
    BBOX = "bbox"
    POINTS = "points"
    TEXT = "text"


@dataclass(frozen=True)
class SegmentPrompt:
    mode: PromptMode
    boxes: Optional[tuple[BoundingBox, ...]] = None
    points: Optional[tuple[tuple[float, float], ...]] = None
    text: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", PromptMode(self.mode))
        populated = [v is not None for v in (self.boxes, self.points, self.text)]
        if sum(populated) != 1:
            raise ValueError("a segment prompt carries exactly one payload")
        expected = {PromptMode.BBOX: 0, PromptMode.POINTS: 1, PromptMode.TEXT: 2}[self.mode]
        if not populated[expected]:
            raise ValueError(f"{self.mode.value} prompt is missing its payload")

    @classmethod
    def from_boxes(cls, boxes: Sequence[BoundingBox]) -> "SegmentPrompt":
        return cls(PromptMode.BBOX, boxes=tuple(boxes))

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]]) -> "SegmentPrompt":
        return cls(PromptMode.POINTS, points=tuple((float(x), float(y)) for x, y in points))

    @classmethod
    def from_text(cls, text: str) -> "SegmentPrompt":
        return cls(PromptMode.TEXT, text=text)

    def to_wire(self) -> dict:
        if self.mode is PromptMode.BBOX:
            return {"mode": "bbox", "boxes": [b.as_list() for b in self.boxes]}
        if self.mode is PromptMode.POINTS:
            return {"mode": "points", "points": [list(p) for p in self.points]}
        return {"mode": "text", "text": self.text}


@dataclass(frozen=True, eq=False)
class GeneratorRequest:
    """Body of an ``inpaint`` or ``compose`` call."""

    task: str
    image: RasterImage
    image_id: str
    mask: BinaryMask
    seed: int
    category: Optional[DefectCategory] = None
    text: str = ""
    params: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        if self.task not in ("inpaint", "compose"):
            raise UsageError(f"unknown generator task {self.task!r}")
        return {
            "task": self.task,
            "image": {
                "id": self.image_id,
                "uri": "",
                "width": self.image.width,
                "height": self.image.height,
                "data": mocks.encode_png(self.image),
            },
            "mask_rle": self.mask.to_rle(),
            "category": self.category.value if self.category else None,
            "text": self.text,
            "seed": self.seed,
            "params": self.params,
        }


def image_wire(image: ImageRef) -> dict:
    body = image.to_dict()
    if image.checksum:
        body["checksum"] = image.checksum
    return body


def _field(reply: Any, name: str, where: str = "reply"):
    if not isinstance(reply, dict) or name not in reply:
        raise ProtocolError(f"{where} is missing field {name!r}")
    return reply[name]


class Gateway:
    """Shareable client for a roster of experts.

    ``transport`` is passed to :class:`httpx.Client`; tests hand in an
    ``httpx.MockTransport``. At most ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        roster: Sequence[ExpertDescriptor] = (),
        *,
        max_in_flight: int = 8,
        token: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.roster = {d.id: d for d in roster}
        self._limit = threading.BoundedSemaphore(max_in_flight)
        self._token = token
        self._client = httpx.Client(transport=transport)
        self.calls: dict[str, int] = {}
        self._calls_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def experts(self, kind: ExpertKind) -> list[ExpertDescriptor]:
        return sorted((d for d in self.roster.values() if d.kind is kind), key=lambda d: d.id)

    def first(self, kind: ExpertKind) -> Optional[ExpertDescriptor]:
        found = self.experts(kind)
        return found[0] if found else None

    # -- transport -----------------------------------------------------------

    def post(self, d: ExpertDescriptor, body: dict, retry: bool = True) -> Any:
        """Send ``body`` to ``d``; one retry on transport failure."""
        body = dict(body, request_id=uuid.uuid4().hex)
        try:
            return self._attempt(d, body)
        except TransportError as first:
            if not retry:
                raise
            logger.warning("expert %s: %s; retrying once", d.id, first)
            return self._attempt(d, body)

    def _attempt(self, d: ExpertDescriptor, body: dict) -> Any:
        with self._calls_lock:
            self.calls[d.id] = self.calls.get(d.id, 0) + 1
        if d.is_disabled:
            raise TransportError(f"expert {d.id!r} is disabled")
        with self._limit:
            if d.is_mock:
                try:
                    return mocks.handle(body, d.mock_seed)
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(f"mock {d.id!r} rejected the request: {exc}") from exc
            headers = {"Authorization": f"Bearer {self._token}"} if self._token else {}
            try:
                resp = self._client.post(d.endpoint, json=body, headers=headers, timeout=d.timeout / 1000)
                resp.raise_for_status()
            except httpx.HTTPError as exc:
                raise TransportError(f"expert {d.id!r} at {d.endpoint}: {exc}") from exc
            try:
                reply = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"expert {d.id!r} returned non-JSON body") from exc
        rid = reply.get("request_id") if isinstance(reply, dict) else None
        if rid is not None and rid != body["request_id"]:
            raise ProtocolError(f"expert {d.id!r} answered request {rid}, expected {body['request_id']}")
        return reply

    # -- typed calls ---------------------------------------------------------

    def call_detector(self, image: ImageRef, d: ExpertDescriptor) -> ExpertOutput:
        if d.kind is not ExpertKind.DETECTOR:
            raise UsageError(f"{d.id!r} is a {d.kind.value}, not a detector")
        reply = self.post(d, {"task": "detect", "kind": d.kind.value, "image": image_wire(image), "params": d.params})
        records = _field(reply, "detections")
        if not isinstance(records, list):
            raise ProtocolError("field 'detections' must be a list")
        dets, warnings = [], []
        for i, rec in enumerate(records):
            where = f"detections[{i}]"
            try:
                x, y, w, h = (float(_field(rec, k, where)) for k in ("x", "y", "w", "h"))
                conf = float(_field(rec, "confidence", where))
                category = DefectCategory.parse(_field(rec, "category", where))
            except (TypeError, ValueError) as exc:
                raise ProtocolError(f"{where}: {exc}") from exc
            if not all(math.isfinite(v) for v in (x, y, w, h, conf)):
                raise ProtocolError(f"{where}: non-finite value")
            if not 0.0 <= conf <= 1.0:
                raise ProtocolError(f"{where}: field 'confidence' outside [0, 1]")
            if w <= 0 or h <= 0:
                warnings.append(f"{where}: degenerate box dropped")
                continue
            raw = BoundingBox(x, y, w, h)
            box = raw.clamp(image.width, image.height)
            if box is None:
                warnings.append(f"{where}: box outside the image dropped")
                continue
            if box != raw:
                warnings.append(f"{where}: box clamped to the image frame")
            dets.append(Detection(box, category, conf, d.id, image.id))
        for w_ in warnings:
            logger.debug("expert %s on %s: %s", d.id, image.id, w_)
        return ExpertOutput(d.id, detections=tuple(dets), image_id=image.id, warnings=tuple(warnings))

    def call_segmenter(
        self, image: ImageRef, prompt: Optional[SegmentPrompt], d: ExpertDescriptor
    ) -> BinaryMask:
        if d.kind not in (ExpertKind.CRACK_SEGMENTER, ExpertKind.PROMPTABLE_SEGMENTER):
            raise UsageError(f"{d.id!r} is a {d.kind.value}, not a segmenter")
        body: dict = {"task": "segment", "kind": d.kind.value, "image": image_wire(image), "params": d.params}
        if d.kind is ExpertKind.CRACK_SEGMENTER:
            if prompt is not None and prompt.mode is PromptMode.TEXT:
                raise UsageError(f"crack segmenter {d.id!r} does not take text prompts")
        else:
            if prompt is None:
                raise UsageError(f"promptable segmenter {d.id!r} needs a prompt")
            body["prompt"] = prompt.to_wire()
        reply = self.post(d, body)
        return _mask_from_reply(reply, image.width, image.height)

    def call_generator(self, request: GeneratorRequest, d: ExpertDescriptor) -> RasterImage:
        if d.kind is not ExpertKind.GENERATOR:
            raise UsageError(f"{d.id!r} is a {d.kind.value}, not a generator")
        body = request.to_wire()
        body["params"] = {**d.params, **body["params"]}
        reply = self.post(d, body)
        rec = _field(reply, "image")
        try:
            out = mocks.decode_png(_field(rec, "data", "image"))
        except GatewayError:
            raise
        except Exception as exc:
            raise ProtocolError(f"generator {d.id!r} returned an undecodable image") from exc
        if (out.width, out.height) != (request.image.width, request.image.height):
            raise ProtocolError(
                f"generator {d.id!r} returned {out.width}x{out.height}, "
                f"expected {request.image.width}x{request.image.height}"
            )
        return out

    def embed(
        self,
        item: "str | RasterImage | ImageRef",
        d: ExpertDescriptor,
        dim: Optional[int] = None,
    ) -> np.ndarray:
        """Unit-norm float32 embedding of a text, raster or image reference."""
        if d.kind is not ExpertKind.EMBEDDER:
            raise UsageError(f"{d.id!r} is a {d.kind.value}, not an embedder")
        dim = int(dim or d.params.get("dim", 512))
        if isinstance(item, str):
            inp: dict = {"text": item}
        elif isinstance(item, RasterImage):
            inp = {"image": {"id": "", "width": item.width, "height": item.height, "checksum": item.digest()}}
        else:
            inp = {"image": image_wire(item)}
        reply = self.post(d, {"task": "embed", "input": inp, "params": {**d.params, "dim": dim}})
        try:
            vec = np.asarray(_field(reply, "embedding"), dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"embedder {d.id!r}: field 'embedding' is not numeric") from exc
        if vec.shape != (dim,):
            raise ProtocolError(f"embedder {d.id!r} returned length {vec.size}, expected {dim}")
        norm = float(np.linalg.norm(vec))
        if not math.isfinite(norm) or norm == 0.0:
            raise ProtocolError(f"embedder {d.id!r} returned a zero or non-finite vector")
        return (vec / norm).astype(np.float32)

    def call_adjudicator(self, body: dict, d: ExpertDescriptor, retry: bool = True) -> str:
        """Raw reply text; parsing is the adjudicator's concern."""
        if d.kind is not ExpertKind.ADJUDICATOR:
            raise UsageError(f"{d.id!r} is a {d.kind.value}, not an adjudicator")
        reply = self.post(d, body, retry=retry)
        return reply if isinstance(reply, str) else json.dumps(reply)


def _mask_from_reply(reply: Any, width: int, height: int) -> BinaryMask:
    rec = _field(reply, "mask_rle")
    try:
        size = _field(rec, "size", "mask_rle")
        h, w = (int(v) for v in size)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"mask_rle.size malformed: {exc}") from exc
    if (w, h) != (width, height):
        raise ProtocolError(f"mask of {w}x{h} does not match the {width}x{height} image")
    try:
        return BinaryMask.from_rle(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"mask_rle.counts malformed: {exc}") from exc
