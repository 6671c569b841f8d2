"""Image, box and binary-mask primitives.

Coordinates follow the image convention: origin at the top-left corner,
x grows rightward and y downward. A box ``(x, y, w, h)`` covers the
half-open ranges ``[x, x + w) x [y, y + h)``.

Masks are stored as COCO-style run-length counts: the grid is flattened in
column-major order and the first count is always the number of leading
zeros (possibly 0).
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image


class ShapeError(ValueError):
    """Raised when masks or images of incompatible dimensions are combined."""


class DefectCategory(str, enum.Enum):
    CRACK = "crack"
    SPALLING = "spalling"
    RUST_STAIN = "rust_stain"
    DEGRADED_PLASTER = "degraded_plaster"
    VEGETATION = "vegetation"
    CONTAMINANT = "contaminant"

    @classmethod
    def parse(cls, value: "str | DefectCategory") -> "DefectCategory":
        """Accept ``"RustStain"``, ``"rust-stain"``, ``"Rust stain"`` and the like."""
        if isinstance(value, cls):
            return value
        key = str(value).strip()
        plain = key.lower().replace("-", "_").replace(" ", "_")
        if plain in cls._value2member_map_:
            return cls(plain)
        # CamelCase -> snake_case
        snake = "".join("_" + ch.lower() if ch.isupper() else ch for ch in key).lstrip("_")
        snake = snake.replace("-", "_").replace(" ", "_").lower()
        while "__" in snake:
            snake = snake.replace("__", "_")
        try:
            return cls(snake)
        except ValueError:
            raise ValueError(f"unknown defect category: {value!r}") from None

    @property
    def display_name(self) -> str:
        return self.value.replace("_", " ").title()


@dataclass(frozen=True)
class ImageRef:
    id: str
    uri: str
    width: int
    height: int
    checksum: Optional[str] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.id!r} has non-positive size {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {"id": self.id, "uri": self.uri, "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class RasterImage:
    """In-memory 8-bit RGB image; ``pixels`` has shape ``(height, width, 3)``."""

    width: int
    height: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"zero-area image {self.width}x{self.height}")
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, 3):
            raise ShapeError(
                f"pixel buffer shape {px.shape} does not match {self.height}x{self.width}x3"
            )
        if px is self.pixels:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterImage":
        array = np.asarray(array)
        return cls(width=array.shape[1], height=array.shape[0], pixels=array)

    @classmethod
    def filled(cls, width: int, height: int, color: Sequence[int]) -> "RasterImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = np.asarray(color, dtype=np.uint8)
        return cls(width, height, px)

    @classmethod
    def from_bytes(cls, width: int, height: int, buffer: bytes) -> "RasterImage":
        if len(buffer) != width * height * 3:
            raise ShapeError(f"buffer length {len(buffer)} != {width}*{height}*3")
        return cls(width, height, np.frombuffer(buffer, dtype=np.uint8).reshape(height, width, 3))

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.width == other.width and self.height == other.height and np.array_equal(
            self.pixels, other.pixels
        )

    __hash__ = None  # type: ignore[assignment]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}:".encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    def crop(self, box: "BoundingBox") -> "RasterImage":
        x0, y0, x1, y1 = box.pixel_span()
        return RasterImage.from_array(self.pixels[y0:y1, x0:x1])

    # PNG is the single lossless codec used for fixtures, checkpoints and the wire.
    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png(cls, data: bytes) -> "RasterImage":
        with Image.open(io.BytesIO(data)) as im:
            return cls.from_array(np.asarray(im.convert("RGB")))

    def save(self, path: "str | Path") -> None:
        Path(path).write_bytes(self.to_png())

    @classmethod
    def load(cls, path: "str | Path") -> "RasterImage":
        return cls.from_png(Path(path).read_bytes())


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self.x, self.y, self.w, self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return self.w / self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def clamp(self, width: int, height: int) -> Optional["BoundingBox"]:
        """Clip to the image frame; ``None`` when nothing of the box remains."""
        x0, y0 = max(0.0, self.x), max(0.0, self.y)
        x1, y1 = min(float(width), self.x2), min(float(height), self.y2)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def pixel_span(self) -> tuple[int, int, int, int]:
        """Pixel index range ``(x0, y0, x1, y1)`` whose centres fall in the box."""
        x0 = int(np.ceil(self.x - 0.5))
        y0 = int(np.ceil(self.y - 0.5))
        x1 = int(np.ceil(self.x2 - 0.5))
        y1 = int(np.ceil(self.y2 - 0.5))
        return x0, y0, x1, y1


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    category: DefectCategory
    confidence: float
    source: str
    image_id: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "category", DefectCategory.parse(self.category))

    def to_dict(self) -> dict:
        return {
            "x": self.box.x,
            "y": self.box.y,
            "w": self.box.w,
            "h": self.box.h,
            "category": self.category.value,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, data: dict, source: str, image_id: Optional[str] = None) -> "Detection":
        return cls(
            BoundingBox(float(data["x"]), float(data["y"]), float(data["w"]), float(data["h"])),
            DefectCategory.parse(data["category"]),
            float(data["confidence"]),
            source,
            image_id,
        )


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# Run-length encoding


def rle_encode(grid: np.ndarray) -> tuple[int, ...]:
    """Column-major run counts of a 2-D {0,1} grid, starting with zeros."""
    flat = np.asarray(grid, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return ()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return tuple(int(c) for c in counts)


def rle_decode(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    total = int(sum(counts))
    if total != width * height:
        raise ShapeError(f"run lengths sum to {total}, expected {width}*{height}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, np.asarray(counts, dtype=np.int64))
    return flat.reshape((height, width), order="F")


def rle_to_string(counts: Sequence[int]) -> str:
    """COCO compressed-string form of run counts (delta + 5-bit varint, offset 48)."""
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def rle_from_string(text: str) -> tuple[int, ...]:
    counts: list[int] = []
    pos = 0
    n = len(text)
    while pos < n:
        x = 0
        k = 0
        more = True
        while more:
            if pos >= n:
                raise ValueError("truncated RLE string")
            ch = ord(text[pos]) - 48
            if ch < 0 or ch > 63:
                raise ValueError(f"invalid RLE character {text[pos]!r}")
            x |= (ch & 0x1F) << (5 * k)
            more = bool(ch & 0x20)
            pos += 1
            k += 1
            if not more and (ch & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return tuple(counts)


@dataclass(frozen=True)
class BinaryMask:
    """Immutable H x W bitmask held as run-length counts."""

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"zero-area mask {self.width}x{self.height}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError("negative run length")
        if sum(counts) != self.width * self.height:
            raise ShapeError(
                f"run lengths sum to {sum(counts)}, expected {self.width * self.height}"
            )
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_array(cls, grid: np.ndarray) -> "BinaryMask":
        grid = np.asarray(grid)
        if grid.ndim != 2:
            raise ShapeError(f"mask grid must be 2-D, got shape {grid.shape}")
        return cls(width=grid.shape[1], height=grid.shape[0], counts=rle_encode(grid))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, (width * height,))

    @classmethod
    def from_box(cls, box: BoundingBox, width: int, height: int) -> "BinaryMask":
        grid = np.zeros((height, width), dtype=bool)
        x0, y0, x1, y1 = box.pixel_span()
        grid[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = True
        return cls.from_array(grid)

    @cached_property
    def array(self) -> np.ndarray:
        """Read-only boolean grid of shape ``(height, width)``."""
        grid = rle_decode(self.counts, self.width, self.height)
        grid.setflags(write=False)
        return grid

    def to_array(self) -> np.ndarray:
        return self.array.copy()

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def is_empty(self) -> bool:
        return self.area == 0

    def bbox(self) -> Optional[BoundingBox]:
        """Tight bounding box of the set pixels."""
        if self.is_empty():
            return None
        ys, xs = np.nonzero(self.array)
        return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))

    def to_rle(self) -> dict:
        """COCO-compatible ``{"size": [h, w], "counts": str}`` record."""
        return {"size": [self.height, self.width], "counts": rle_to_string(self.counts)}

    @classmethod
    def from_rle(cls, record: dict) -> "BinaryMask":
        height, width = (int(v) for v in record["size"])
        counts = record["counts"]
        if isinstance(counts, str):
            counts = rle_from_string(counts)
        return cls(width, height, tuple(counts))


def _check_same_shape(masks: Iterable[BinaryMask]) -> None:
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise ShapeError(f"mask dimension mismatch: {sorted(shapes)}")


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("mask_union needs at least one mask")
    _check_same_shape(masks)
    if len(masks) == 1:
        return masks[0]
    grid = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        grid |= m.array
    return BinaryMask.from_array(grid)


def mask_intersection(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_same_shape((a, b))
    return BinaryMask.from_array(a.array & b.array)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    _check_same_shape((a, b))
    union = int(np.count_nonzero(a.array | b.array))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.array & b.array)) / union


def clip_mask_to_boxes(mask: BinaryMask, anchors: Sequence[BoundingBox]) -> BinaryMask:
    """Keep only the mask pixels that fall inside at least one anchor box."""
    for box in anchors:
        if not box.within(mask.width, mask.height):
            raise ValueError(f"anchor {box} lies outside the {mask.width}x{mask.height} frame")
    keep = np.zeros(mask.shape, dtype=bool)
    for box in anchors:
        x0, y0, x1, y1 = box.pixel_span()
        keep[y0:y1, x0:x1] = True
    return BinaryMask.from_array(mask.array & keep)


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilation by a square structuring element of side ``2 * radius + 1``."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0 or mask.is_empty():
        return mask
    return BinaryMask.from_array(dilate_array(mask.array, radius))


def dilate_array(grid: np.ndarray, radius: int) -> np.ndarray:
    # square element is separable: max over rows, then over columns
    out = _shift_max(np.asarray(grid, dtype=bool), radius, axis=0)
    return _shift_max(out, radius, axis=1)


def _shift_max(grid: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = grid.shape[axis]
    out = grid.copy()
    for d in range(1, min(radius, n - 1) + 1):
        lead = [slice(None)] * 2
        trail = [slice(None)] * 2
        lead[axis], trail[axis] = slice(d, None), slice(None, -d)
        out[tuple(lead)] |= grid[tuple(trail)]
        out[tuple(trail)] |= grid[tuple(lead)]
    return out
