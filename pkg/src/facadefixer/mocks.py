"""Deterministic stand-ins for every external expert.

Each handler takes a wire request body and a seed and returns a wire reply,
exactly as a live endpoint would. Outputs are pure functions of
``(seed, input identity)``.

Detectors and segmenters share a hidden "scene" per image id: one to three
defect instances with integer boxes. Different expert seeds perturb the
same scene, which gives the ensemble strategies real agreement structure,
and the synthetic fixture set is painted from the same scenes.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import BinaryMask, BoundingBox, DefectCategory, RasterImage, dilate_array

CATEGORIES = tuple(DefectCategory)


def rng_for(*parts) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def encode_png(image: RasterImage) -> str:
    return base64.b64encode(image.to_png()).decode("ascii")


def decode_png(data: str) -> RasterImage:
    return RasterImage.from_png(base64.b64decode(data))


# ---------------------------------------------------------------------------
# Hidden scenes


@dataclass(frozen=True)
class SceneInstance:
    box: BoundingBox
    category: DefectCategory
    mask: BinaryMask


def _ellipse(width: int, height: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return ((xs + 0.5 - cx) / max(rx, 0.5)) ** 2 + ((ys + 0.5 - cy) / max(ry, 0.5)) ** 2 <= 1.0


def _polyline(width: int, height: int, points: list[tuple[float, float]], thickness: int) -> np.ndarray:
    grid = np.zeros((height, width), dtype=bool)
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        steps = int(max(abs(x1 - x0), abs(y1 - y0)) * 2) + 1
        for t in np.linspace(0.0, 1.0, steps):
            x = int(np.clip(np.floor(x0 + t * (x1 - x0)), 0, width - 1))
            y = int(np.clip(np.floor(y0 + t * (y1 - y0)), 0, height - 1))
            grid[y, x] = True
    if thickness > 1:
        grid = dilate_array(grid, thickness // 2)
    return grid


def _crack_points(box: BoundingBox, rng: np.random.Generator, wobble: float) -> list[tuple[float, float]]:
    horizontal = box.w >= box.h
    n = 4
    pts = []
    for i in range(n):
        t = i / (n - 1)
        if horizontal:
            x = box.x + 1 + t * (box.w - 2)
            y = box.y + box.h / 2 + rng.uniform(-wobble, wobble) * box.h
        else:
            y = box.y + 1 + t * (box.h - 2)
            x = box.x + box.w / 2 + rng.uniform(-wobble, wobble) * box.w
        pts.append((float(np.clip(x, box.x, box.x2 - 1)), float(np.clip(y, box.y, box.y2 - 1))))
    return pts


def _clip_to_box(grid: np.ndarray, box: BoundingBox) -> np.ndarray:
    keep = np.zeros_like(grid)
    x0, y0, x1, y1 = box.pixel_span()
    keep[y0:y1, x0:x1] = True
    return grid & keep


def mock_scene(image_id: str, width: int, height: int) -> list[SceneInstance]:
    """The latent defects of an image, shared by all mock experts."""
    rng = rng_for("scene", image_id, width, height)
    n = int(rng.integers(1, 4))
    placed: list[SceneInstance] = []
    for _ in range(n):
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        for _attempt in range(50):
            if cat is DefectCategory.CRACK:
                long_side = rng.uniform(0.3, 0.5)
                short_side = rng.uniform(0.07, 0.12)
                if rng.random() < 0.5:
                    fw, fh = long_side, short_side
                else:
                    fw, fh = short_side, long_side
            else:
                fw, fh = rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3)
            w = max(4, int(round(fw * width)))
            h = max(4, int(round(fh * height)))
            x = int(rng.integers(0, max(1, width - w)))
            y = int(rng.integers(0, max(1, height - h)))
            box = BoundingBox(x, y, min(w, width - x), min(h, height - y))
            if all(_disjoint(box, p.box, gap=2) for p in placed):
                break
        else:
            continue
        if cat is DefectCategory.CRACK:
            grid = _polyline(width, height, _crack_points(box, rng, 0.25), 2)
        else:
            grid = _ellipse(width, height, box.x + box.w / 2, box.y + box.h / 2, box.w / 2, box.h / 2)
        grid = _clip_to_box(grid, box)
        placed.append(SceneInstance(box, cat, BinaryMask.from_array(grid)))
    return placed


def _disjoint(a: BoundingBox, b: BoundingBox, gap: float = 0.0) -> bool:
    return a.x2 + gap <= b.x or b.x2 + gap <= a.x or a.y2 + gap <= b.y or b.y2 + gap <= a.y


# ---------------------------------------------------------------------------
# Handlers


def _image_dims(body: dict) -> tuple[str, int, int]:
    img = body["image"]
    return str(img["id"]), int(img["width"]), int(img["height"])


def mock_detect(body: dict, seed: int) -> dict:
    image_id, width, height = _image_dims(body)
    rng = rng_for("detect", seed, image_id)
    miss_rate = float(body.get("params", {}).get("miss_rate", 0.15))
    dets = []
    for inst in mock_scene(image_id, width, height):
        dropped = rng.random() < miss_rate
        jitter = rng.normal(0.0, 0.03, size=4)
        conf = float(rng.uniform(0.55, 0.98))
        if dropped:
            continue
        b = inst.box
        x = b.x + jitter[0] * b.w
        y = b.y + jitter[1] * b.h
        w = b.w * (1 + jitter[2])
        h = b.h * (1 + jitter[3])
        dets.append(_det_record(x, y, w, h, inst.category, conf, width, height))
    if rng.random() < 0.35:
        fw, fh = rng.uniform(0.08, 0.2, size=2)
        w, h = fw * width, fh * height
        x, y = rng.uniform(0, width - w), rng.uniform(0, height - h)
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        dets.append(_det_record(x, y, w, h, cat, float(rng.uniform(0.05, 0.5)), width, height))
    if not dets:
        inst = mock_scene(image_id, width, height)[0]
        b = inst.box
        dets.append(_det_record(b.x, b.y, b.w, b.h, inst.category, 0.5, width, height))
    dets.sort(key=lambda d: -d["confidence"])
    return {"detections": dets[:3]}


def _det_record(x, y, w, h, cat, conf, width, height) -> dict:
    box = BoundingBox(float(x), float(y), max(float(w), 1.0), max(float(h), 1.0)).clamp(width, height)
    assert box is not None
    return {
        "x": round(box.x, 3),
        "y": round(box.y, 3),
        "w": round(box.w, 3),
        "h": round(box.h, 3),
        "category": cat.value,
        "confidence": round(conf, 4),
    }


def mock_segment(body: dict, seed: int) -> dict:
    image_id, width, height = _image_dims(body)
    kind = body.get("kind", "promptable_segmenter")
    rng = rng_for("segment", seed, image_id, repr(body.get("prompt")))
    if kind == "crack_segmenter":
        grid = np.zeros((height, width), dtype=bool)
        for inst in mock_scene(image_id, width, height):
            if inst.category is DefectCategory.CRACK:
                line = _polyline(width, height, _crack_points(inst.box, rng, 0.3), int(rng.integers(1, 4)))
                grid |= _clip_to_box(line, inst.box)
        return {"mask_rle": BinaryMask.from_array(grid).to_rle()}

    prompt = body["prompt"]
    mode = prompt["mode"]
    grid = np.zeros((height, width), dtype=bool)
    if mode == "bbox":
        for bx, by, bw, bh in prompt["boxes"]:
            box = BoundingBox(bx, by, bw, bh)
            grid |= _clip_to_box(_blob_in(box, rng, width, height), box)
    elif mode == "points":
        radius = max(2.0, 0.08 * min(width, height))
        for px, py in prompt["points"]:
            r = radius * rng.uniform(0.7, 1.0)
            grid |= _ellipse(width, height, px, py, r, r)
    elif mode == "text":
        from .gateway import prompt_map

        concept = str(prompt["text"]).lower()
        for inst in mock_scene(image_id, width, height):
            if concept in prompt_map(inst.category):
                grid |= _clip_to_box(_blob_in(inst.box, rng, width, height), inst.box)
    return {"mask_rle": BinaryMask.from_array(grid).to_rle()}


def _blob_in(box: BoundingBox, rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    cx = box.x + box.w / 2 + rng.uniform(-0.05, 0.05) * box.w
    cy = box.y + box.h / 2 + rng.uniform(-0.05, 0.05) * box.h
    rx = box.w / 2 * rng.uniform(0.75, 0.98)
    ry = box.h / 2 * rng.uniform(0.75, 0.98)
    return _ellipse(width, height, cx, cy, rx, ry)


def mean_color_inpaint(image: RasterImage, hole: BinaryMask, ring_width: int) -> RasterImage:
    """Fill ``hole`` with the mean colour of the ring of ``ring_width`` around it."""
    grid = hole.array
    ring = dilate_array(grid, ring_width) & ~grid
    source = image.pixels[ring] if ring.any() else image.pixels.reshape(-1, 3)
    color = np.rint(source.astype(np.float64).mean(axis=0)).astype(np.uint8)
    out = image.pixels.copy()
    out[grid] = color
    return RasterImage(image.width, image.height, out)


def feather_weights(mask: np.ndarray, feather: int) -> np.ndarray:
    """1 inside the mask, decaying linearly over ``feather`` square rings outside it."""
    weights = mask.astype(np.float64)
    grown = mask.copy()
    for d in range(1, feather + 1):
        ring = dilate_array(grown, 1) & ~grown
        weights[ring] = 1.0 - d / (feather + 1)
        grown |= ring
    return weights


def alpha_blend(
    background: RasterImage,
    crop: RasterImage,
    placement: BoundingBox,
    mask: BinaryMask,
    alpha: float,
    feather: int,
) -> RasterImage:
    """Blend ``crop`` (already sized to ``placement``) where the frame ``mask`` is set."""
    x0, y0, x1, y1 = placement.pixel_span()
    if (x1 - x0, y1 - y0) != (crop.width, crop.height):
        raise ValueError("crop size does not match the placement box")
    local = mask.array[y0:y1, x0:x1]
    a = alpha * feather_weights(local, feather)[..., None]
    region = background.pixels[y0:y1, x0:x1].astype(np.float64)
    blended = np.rint(region * (1.0 - a) + crop.pixels.astype(np.float64) * a)
    out = background.pixels.copy()
    out[y0:y1, x0:x1] = np.clip(blended, 0, 255).astype(np.uint8)
    return RasterImage(background.width, background.height, out)


def mock_generate(body: dict, seed: int) -> dict:
    task = body["task"]
    image = decode_png(body["image"]["data"])
    mask = BinaryMask.from_rle(body["mask_rle"])
    params = body.get("params", {})
    if task == "inpaint":
        out = mean_color_inpaint(image, mask, int(params.get("dilation_radius", 0)) + 2)
    elif task == "compose":
        crop = decode_png(params["crop"])
        placement = BoundingBox(*params["placement"])
        out = alpha_blend(image, crop, placement, mask, float(params.get("alpha", 1.0)), int(params.get("feather", 0)))
    else:
        raise ValueError(f"generator cannot handle task {task!r}")
    return {"image": {"width": out.width, "height": out.height, "data": encode_png(out)}}


def mock_embed(body: dict, seed: int) -> dict:
    dim = int(body.get("params", {}).get("dim", 512))
    inp = body["input"]
    if "text" in inp:
        identity = "text:" + str(inp["text"])
    else:
        img = inp["image"]
        identity = "image:" + str(img.get("checksum") or hashlib.sha256(str(img.get("data", "")).encode()).hexdigest() + str(img.get("id")))
    vec = rng_for("embed", seed, identity).normal(size=dim)
    vec /= np.linalg.norm(vec)
    return {"embedding": vec.tolist()}


def mock_adjudicate_wire(body: dict, seed: int) -> dict:
    from .adjudication import AdjudicationRequest, mock_adjudicate

    verdict = mock_adjudicate(AdjudicationRequest.from_wire(body))
    return {"chosen": verdict.chosen, "rationale": verdict.rationale}


def mock_plan(body: dict, seed: int) -> dict:
    from .orchestrator import InstructionProfile, plan

    return plan(InstructionProfile.from_wire(body["profile"])).to_wire()


HANDLERS: dict[str, Callable[[dict, int], dict]] = {
    "detect": mock_detect,
    "segment": mock_segment,
    "inpaint": mock_generate,
    "compose": mock_generate,
    "embed": mock_embed,
    "adjudicate": mock_adjudicate_wire,
    "plan": mock_plan,
}


def handle(body: dict, seed: int) -> dict:
    return HANDLERS[body["task"]](body, seed)
