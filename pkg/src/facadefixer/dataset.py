"""Image folders with per-image JSON sidecars, plus the synthetic facade set.

A dataset directory holds ``<id>.png`` next to ``<id>.json``::

    {"image": {"id", "width", "height"},
     "instances": [{"bbox": [x, y, w, h], "category", "confidence"?, "mask_rle"?}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .geometry import BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage
from .memory import MemoryBank, MemoryEntry, Provenance
from .mocks import mock_scene, rng_for

SYNTHETIC_SIZE = (160, 120)

# paint colours chosen far from the facade base so blends are always visible
PAINT = {
    DefectCategory.CRACK: (38, 34, 32),
    DefectCategory.SPALLING: (112, 104, 96),
    DefectCategory.RUST_STAIN: (156, 78, 28),
    DefectCategory.DEGRADED_PLASTER: (246, 244, 236),
    DefectCategory.VEGETATION: (58, 124, 42),
    DefectCategory.CONTAMINANT: (92, 66, 118),
}

MORPHOLOGY = {
    DefectCategory.CRACK: "thin dark fracture running across the render",
    DefectCategory.SPALLING: "rough cavity where the surface layer broke off",
    DefectCategory.RUST_STAIN: "orange streak bleeding from embedded metal",
    DefectCategory.DEGRADED_PLASTER: "pale flaking patch of lifted coating",
    DefectCategory.VEGETATION: "green tuft rooted in a joint",
    DefectCategory.CONTAMINANT: "dark foreign deposit stuck to the wall",
}


@dataclass(frozen=True)
class Instance:
    box: BoundingBox
    category: DefectCategory
    confidence: Optional[float] = None
    mask: Optional[BinaryMask] = None

    def __post_init__(self):
        object.__setattr__(self, "category", DefectCategory.parse(self.category))

    def to_dict(self) -> dict:
        rec: dict = {"bbox": self.box.as_list(), "category": self.category.value}
        if self.confidence is not None:
            rec["confidence"] = self.confidence
        if self.mask is not None:
            rec["mask_rle"] = self.mask.to_rle()
        return rec

    @classmethod
    def from_dict(cls, rec: dict) -> "Instance":
        mask = BinaryMask.from_rle(rec["mask_rle"]) if rec.get("mask_rle") else None
        conf = rec.get("confidence")
        return cls(BoundingBox(*rec["bbox"]), DefectCategory.parse(rec["category"]),
                   None if conf is None else float(conf), mask)

    @classmethod
    def from_detection(cls, det: Detection, mask: Optional[BinaryMask] = None) -> "Instance":
        return cls(det.box, det.category, det.confidence, mask)


@dataclass(frozen=True)
class Annotation:
    image: ImageRef
    instances: tuple[Instance, ...]

    def to_dict(self) -> dict:
        img = {"id": self.image.id, "width": self.image.width, "height": self.image.height}
        return {"image": img, "instances": [i.to_dict() for i in self.instances]}

    @classmethod
    def from_dict(cls, rec: dict, uri: str = "") -> "Annotation":
        img = rec["image"]
        ref = ImageRef(str(img["id"]), uri, int(img["width"]), int(img["height"]))
        return cls(ref, tuple(Instance.from_dict(r) for r in rec.get("instances", [])))

    def detections(self, source: str = "gt") -> list[Detection]:
        return [Detection(i.box, i.category, 1.0 if i.confidence is None else i.confidence, source, self.image.id)
                for i in self.instances]


def write_sidecar(path: "str | Path", ann: Annotation) -> None:
    Path(path).write_text(json.dumps(ann.to_dict(), indent=2, sort_keys=True))


def read_sidecar(path: "str | Path") -> Annotation:
    path = Path(path)
    try:
        return Annotation.from_dict(json.loads(path.read_text()), uri=str(path.with_suffix(".png")))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed sidecar {path}: {exc}") from exc


def image_ids(directory: "str | Path") -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.png"))


def load_image(directory: "str | Path", image_id: str) -> tuple[RasterImage, ImageRef]:
    path = Path(directory) / f"{image_id}.png"
    img = RasterImage.load(path)
    return img, ImageRef(image_id, path.resolve().as_uri(), img.width, img.height, img.digest())


def iter_annotations(directory: "str | Path") -> Iterator[Annotation]:
    for path in sorted(Path(directory).glob("*.json")):
        yield read_sidecar(path)


def write_sample(directory: "str | Path", image_id: str, image: RasterImage, instances: Sequence[Instance]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image.save(directory / f"{image_id}.png")
    ref = ImageRef(image_id, "", image.width, image.height)
    write_sidecar(directory / f"{image_id}.json", Annotation(ref, tuple(instances)))


# -- synthetic facades -------------------------------------------------------


def synthetic_facade(image_id: str, width: int, height: int) -> tuple[RasterImage, list[Instance]]:
    """Render the latent scene of ``image_id`` onto a brick-like wall."""
    rng = rng_for("facade", image_id, width, height)
    base = np.array([196, 184, 164], dtype=np.float64) + rng.uniform(-12, 12, size=3)
    px = np.tile(base, (height, width, 1))
    px += rng.normal(0.0, 4.0, size=px.shape)
    course = int(rng.integers(10, 16))
    px[::course, :, :] -= 18
    for row in range(0, height, course):
        offset = (row // course) % 2 * course
        px[row : row + course, offset :: 2 * course, :] -= 12
    instances = []
    for inst in mock_scene(image_id, width, height):
        grid = inst.mask.array
        paint = np.array(PAINT[inst.category], dtype=np.float64)
        px[grid] = paint + rng.normal(0.0, 5.0, size=(int(grid.sum()), 3))
        instances.append(Instance(inst.box, inst.category, None, inst.mask))
    image = RasterImage.from_array(np.clip(np.rint(px), 0, 255).astype(np.uint8))
    return image, instances


def synthetic_ids(n: int, prefix: str = "facade") -> list[str]:
    return [f"{prefix}-{i:03d}" for i in range(n)]


def write_synthetic_set(directory: "str | Path", n: int = 10, size: tuple[int, int] = SYNTHETIC_SIZE,
                        prefix: str = "facade") -> list[str]:
    ids = synthetic_ids(n, prefix)
    for image_id in ids:
        image, instances = synthetic_facade(image_id, *size)
        write_sample(directory, image_id, image, instances)
    return ids


def bundled_fixtures() -> Path:
    """Directory of the ten-image synthetic set shipped with the package."""
    return Path(str(resources.files("facadefixer") / "data" / "synthetic10"))


def seed_bank(
    bank: MemoryBank,
    directory: "str | Path",
    embed: Callable[[RasterImage], np.ndarray],
) -> list[str]:
    """Add every annotated instance with a mask as a real entry."""
    added = []
    for ann in iter_annotations(directory):
        image, _ = load_image(directory, ann.image.id)
        for inst in ann.instances:
            if inst.mask is None or inst.mask.is_empty():
                continue
            box = inst.mask.bbox()
            x0, y0, x1, y1 = box.pixel_span()
            crop = image.crop(box)
            local = BinaryMask.from_array(inst.mask.array[y0:y1, x0:x1])
            entry = MemoryEntry.create(crop, local, inst.category, MORPHOLOGY[inst.category], embed(crop),
                                       Provenance.REAL, {"source_image": ann.image.id})
            if entry.id not in bank:
                added.append(bank.insert(entry))
    return added
