"""Embedding-indexed store of defect knowledge.

Each entry pairs a defect crop with its local mask, category, a short
morphology text and an embedding. Retrieval is an exact cosine scan.
Background templates live in a parallel section of the same store.

On disk::

    bank/manifest.json
    bank/entries/<id>/{crop.png, mask.rle, meta.json, embedding.f32}
    bank/backgrounds/<id>/{image.png, meta.json, embedding.f32}
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .geometry import BinaryMask, BoundingBox, DefectCategory, RasterImage

FORMAT_VERSION = 1
DEFAULT_DIM = 512
MIN_SCALE = 0.5
MAX_ASPECT_RATIO = 2.0


class BankError(Exception):
    pass


class DuplicateEntryError(BankError):
    pass


class DimensionError(BankError, ValueError):
    pass


class CorruptBankError(BankError):
    pass


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _as_vector(embedding) -> np.ndarray:
    vec = np.ascontiguousarray(embedding, dtype="<f4").reshape(-1)
    vec.setflags(write=False)
    return vec


def content_id(prefix: str, *parts: "bytes | str") -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else p.encode())
        h.update(b"\x00")
    return f"{prefix}-{h.hexdigest()[:16]}"


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    id: str
    crop: RasterImage
    mask: BinaryMask
    category: DefectCategory
    text: str
    embedding: np.ndarray = field(repr=False)
    provenance: Provenance = Provenance.REAL
    created_at: str = field(default_factory=_now)
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "category", DefectCategory.parse(self.category))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "embedding", _as_vector(self.embedding))
        if self.mask.shape != (self.crop.height, self.crop.width):
            raise ValueError(
                f"entry {self.id!r}: mask {self.mask.width}x{self.mask.height} "
                f"does not match crop {self.crop.width}x{self.crop.height}"
            )

    @classmethod
    def create(
        cls,
        crop: RasterImage,
        mask: BinaryMask,
        category: "DefectCategory | str",
        text: str,
        embedding,
        provenance: "Provenance | str" = Provenance.REAL,
        lineage: Optional[dict] = None,
        created_at: Optional[str] = None,
    ) -> "MemoryEntry":
        """Build an entry whose id is a hash of its content."""
        category = DefectCategory.parse(category)
        provenance = Provenance(provenance)
        eid = content_id(
            "e", crop.digest(), json.dumps(mask.to_rle(), sort_keys=True),
            category.value, text, provenance.value,
        )
        return cls(eid, crop, mask, category, text, embedding, provenance,
                   created_at or _now(), dict(lineage or {}))

    def meta(self) -> dict:
        return {
            "id": self.id,
            "category": self.category.value,
            "text": self.text,
            "provenance": self.provenance.value,
            "created_at": self.created_at,
            "lineage": self.lineage,
            "crop": {"width": self.crop.width, "height": self.crop.height, "checksum": self.crop.digest()},
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        return (
            self.meta() == other.meta()
            and self.crop == other.crop
            and self.mask == other.mask
            and self.embedding.tobytes() == other.embedding.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BackgroundTemplate:
    id: str
    image: RasterImage
    embedding: np.ndarray = field(repr=False)
    provenance: Provenance = Provenance.SYNTHETIC
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "embedding", _as_vector(self.embedding))

    @classmethod
    def create(cls, image: RasterImage, embedding, provenance="synthetic", lineage=None) -> "BackgroundTemplate":
        return cls(content_id("bg", image.digest()), image, embedding, provenance, dict(lineage or {}))

    def meta(self) -> dict:
        return {
            "id": self.id,
            "provenance": self.provenance.value,
            "lineage": self.lineage,
            "image": {"width": self.image.width, "height": self.image.height, "checksum": self.image.digest()},
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BackgroundTemplate):
            return NotImplemented
        return (
            self.meta() == other.meta()
            and self.image == other.image
            and self.embedding.tobytes() == other.embedding.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class QuerySpec:
    embedding: np.ndarray
    k: int = 1
    category: Optional[DefectCategory] = None
    region: Optional[BoundingBox] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.category is not None:
            object.__setattr__(self, "category", DefectCategory.parse(self.category))
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float64).reshape(-1))


def fits_region(mask_w: float, mask_h: float, region: BoundingBox) -> bool:
    """Scale-and-aspect compatibility of a mask bbox with a target region.

    Some uniform scale in [0.5, 1] must make the mask fit inside the region,
    and the two aspect ratios may differ by at most a factor of two.
    """
    if mask_w <= 0 or mask_h <= 0:
        return False
    if MIN_SCALE * mask_w > region.w or MIN_SCALE * mask_h > region.h:
        return False
    a, b = mask_w / mask_h, region.w / region.h
    return max(a / b, b / a) <= MAX_ASPECT_RATIO


def entry_fits(entry: MemoryEntry, region: BoundingBox) -> bool:
    box = entry.mask.bbox()
    return box is not None and fits_region(box.w, box.h, region)


def _unit_query(vec: np.ndarray, dim: int) -> np.ndarray:
    if vec.shape != (dim,):
        raise DimensionError(f"query has length {vec.size}, bank dimension is {dim}")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("zero-norm query embedding: cosine is undefined")
    return vec / norm


class MemoryBank:
    """Single-writer, multi-reader store.

    With a ``root`` directory every insert is written through before it
    returns; without one the bank lives in memory until :func:`persist`.
    """

    def __init__(self, dim: int = DEFAULT_DIM, root: "str | Path | None" = None):
        if dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.dim = int(dim)
        self.root = Path(root) if root is not None else None
        self._lock = threading.RLock()
        self._entries: dict[str, MemoryEntry] = {}
        self._backgrounds: dict[str, BackgroundTemplate] = {}
        self._matrix: Optional[tuple[list[str], np.ndarray]] = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            _write_manifest(self.root, self.dim, [], [])

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, eid: str) -> bool:
        return eid in self._entries or eid in self._backgrounds

    def entries(self) -> list[MemoryEntry]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def backgrounds(self) -> list[BackgroundTemplate]:
        with self._lock:
            return [self._backgrounds[k] for k in sorted(self._backgrounds)]

    def get(self, eid: str) -> MemoryEntry:
        return self._entries[eid]

    def get_background(self, bid: str) -> BackgroundTemplate:
        return self._backgrounds[bid]

    def _check_vector(self, owner: str, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise DimensionError(f"{owner}: embedding length {vec.size} != bank dimension {self.dim}")
        if not np.all(np.isfinite(vec)) or not np.any(vec):
            raise ValueError(f"{owner}: embedding must be finite and nonzero")

    def insert(self, entry: MemoryEntry) -> str:
        self._check_vector(f"entry {entry.id!r}", entry.embedding)
        with self._lock:
            if entry.id in self:
                raise DuplicateEntryError(f"entry {entry.id!r} already in bank")
            if self.root is not None:
                _write_entry(self.root, entry)
            self._entries[entry.id] = entry
            self._matrix = None
            if self.root is not None:
                _write_manifest(self.root, self.dim, self._entries, self._backgrounds)
        return entry.id

    def insert_background(self, bg: BackgroundTemplate) -> str:
        self._check_vector(f"background {bg.id!r}", bg.embedding)
        with self._lock:
            if bg.id in self:
                raise DuplicateEntryError(f"background {bg.id!r} already in bank")
            if self.root is not None:
                _write_background(self.root, bg)
            self._backgrounds[bg.id] = bg
            if self.root is not None:
                _write_manifest(self.root, self.dim, self._entries, self._backgrounds)
        return bg.id

    def _index(self) -> tuple[list[str], np.ndarray]:
        with self._lock:
            if self._matrix is None:
                ids = sorted(self._entries)
                mat = np.array([self._entries[i].embedding for i in ids], dtype=np.float64).reshape(len(ids), self.dim)
                norms = np.linalg.norm(mat, axis=1)
                if np.any(norms == 0):
                    bad = ids[int(np.argmin(norms))]
                    raise ValueError(f"stored embedding of {bad!r} has zero norm")
                self._matrix = (ids, mat / norms[:, None])
            return self._matrix

    def query_top_k(self, spec: QuerySpec) -> list[tuple[MemoryEntry, float]]:
        """Entries ranked by cosine similarity, ties broken by id."""
        q = _unit_query(spec.embedding, self.dim)
        ids, mat = self._index()
        if not ids:
            return []
        sims = mat @ q
        ranked = []
        for eid, s in zip(ids, sims):
            e = self._entries[eid]
            if spec.category is not None and e.category is not spec.category:
                continue
            if spec.region is not None and not entry_fits(e, spec.region):
                continue
            ranked.append((-float(s), eid))
        ranked.sort()
        return [(self._entries[eid], -neg) for neg, eid in ranked[: spec.k]]

    def retrieve_compatible_mask(
        self, region: BoundingBox, category: "DefectCategory | str", embedding
    ) -> Optional[MemoryEntry]:
        hits = self.query_top_k(QuerySpec(embedding, k=1, category=DefectCategory.parse(category), region=region))
        return hits[0][0] if hits else None

    def query_backgrounds(self, embedding, k: int = 1) -> list[tuple[BackgroundTemplate, float]]:
        q = _unit_query(np.asarray(embedding, dtype=np.float64).reshape(-1), self.dim)
        scored = []
        for bg in self.backgrounds():
            v = bg.embedding.astype(np.float64)
            scored.append((-float(v @ q / np.linalg.norm(v)), bg.id))
        scored.sort()
        return [(self._backgrounds[i], -s) for s, i in scored[:k]]

    def stats(self) -> dict:
        with self._lock:
            by_cat: dict[str, int] = {}
            by_prov: dict[str, int] = {}
            for e in self._entries.values():
                by_cat[e.category.value] = by_cat.get(e.category.value, 0) + 1
                by_prov[e.provenance.value] = by_prov.get(e.provenance.value, 0) + 1
            return {
                "dim": self.dim,
                "entries": len(self._entries),
                "backgrounds": len(self._backgrounds),
                "by_category": dict(sorted(by_cat.items())),
                "by_provenance": dict(sorted(by_prov.items())),
            }

    def copy(self, root: "str | Path | None" = None) -> "MemoryBank":
        other = MemoryBank(self.dim, root)
        for bg in self.backgrounds():
            other.insert_background(bg)
        for e in self.entries():
            other.insert(e)
        return other


# -- on-disk format ---------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, indent=2, sort_keys=True).encode()


def _write_manifest(root: Path, dim: int, entries: Iterable[str], backgrounds: Iterable[str]) -> None:
    manifest = {
        "version": FORMAT_VERSION,
        "dim": dim,
        "entries": sorted(entries),
        "backgrounds": sorted(backgrounds),
    }
    _atomic_write(root / "manifest.json", _json_bytes(manifest))


def _write_dir(final: Path, files: dict[str, bytes]) -> None:
    # build the directory aside, then rename so readers never see half an entry
    final.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=final.parent, prefix=".tmp-"))
    try:
        for name, data in files.items():
            (staging / name).write_bytes(data)
        if final.exists():
            shutil.rmtree(final)
        os.replace(staging, final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def _write_entry(root: Path, e: MemoryEntry) -> None:
    _write_dir(root / "entries" / e.id, {
        "crop.png": e.crop.to_png(),
        "mask.rle": _json_bytes(e.mask.to_rle()),
        "meta.json": _json_bytes(e.meta()),
        "embedding.f32": e.embedding.astype("<f4").tobytes(),
    })


def _write_background(root: Path, bg: BackgroundTemplate) -> None:
    _write_dir(root / "backgrounds" / bg.id, {
        "image.png": bg.image.to_png(),
        "meta.json": _json_bytes(bg.meta()),
        "embedding.f32": bg.embedding.astype("<f4").tobytes(),
    })


def _read_embedding(path: Path, dim: int, owner: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptBankError(f"{owner}: cannot read embedding ({exc})") from exc
    if len(raw) != 4 * dim:
        raise CorruptBankError(f"{owner}: embedding blob has {len(raw)} bytes, expected {4 * dim}")
    return np.frombuffer(raw, dtype="<f4").copy()


def _read_entry(root: Path, eid: str, dim: int) -> MemoryEntry:
    d = root / "entries" / eid
    try:
        meta = json.loads((d / "meta.json").read_text())
        crop = RasterImage.load(d / "crop.png")
        mask = BinaryMask.from_rle(json.loads((d / "mask.rle").read_text()))
    except Exception as exc:
        raise CorruptBankError(f"entry {eid!r}: {exc}") from exc
    if meta.get("id") != eid:
        raise CorruptBankError(f"entry {eid!r}: meta.json names {meta.get('id')!r}")
    emb = _read_embedding(d / "embedding.f32", dim, f"entry {eid!r}")
    try:
        return MemoryEntry(eid, crop, mask, meta["category"], meta["text"], emb,
                           meta["provenance"], meta["created_at"], meta.get("lineage", {}))
    except Exception as exc:
        raise CorruptBankError(f"entry {eid!r}: {exc}") from exc


def _read_background(root: Path, bid: str, dim: int) -> BackgroundTemplate:
    d = root / "backgrounds" / bid
    try:
        meta = json.loads((d / "meta.json").read_text())
        image = RasterImage.load(d / "image.png")
    except Exception as exc:
        raise CorruptBankError(f"background {bid!r}: {exc}") from exc
    emb = _read_embedding(d / "embedding.f32", dim, f"background {bid!r}")
    return BackgroundTemplate(bid, image, emb, meta["provenance"], meta.get("lineage", {}))


def persist(bank: MemoryBank, path: "str | Path") -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with bank._lock:
        for e in bank.entries():
            _write_entry(root, e)
        for bg in bank.backgrounds():
            _write_background(root, bg)
        _write_manifest(root, bank.dim, bank._entries, bank._backgrounds)


def load(path: "str | Path", writable: bool = False) -> MemoryBank:
    """Read a persisted bank; with ``writable`` later inserts go back to ``path``."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise CorruptBankError(f"unreadable manifest in {root}: {exc}") from exc
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise CorruptBankError(f"bank format version {version!r} is not supported (expected {FORMAT_VERSION})")
    bank = MemoryBank(int(manifest["dim"]))
    for bid in manifest.get("backgrounds", []):
        bank._backgrounds[bid] = _read_background(root, bid, bank.dim)
    for eid in manifest.get("entries", []):
        bank._entries[eid] = _read_entry(root, eid, bank.dim)
    if writable:
        bank.root = root
    return bank


def open_bank(path: "str | Path", dim: int = DEFAULT_DIM) -> MemoryBank:
    """Load the bank at ``path`` for writing, creating it when absent."""
    root = Path(path)
    if (root / "manifest.json").exists():
        return load(root, writable=True)
    return MemoryBank(dim, root)


def archive_synthetic(
    sample,
    bank: MemoryBank,
    embedder: Optional[Callable[[RasterImage], np.ndarray]] = None,
    skip_existing: bool = False,
) -> list[str]:
    """Store every instance of an augmented sample as a synthetic entry.

    The embedding defaults to that of the entry the instance was composed
    from, so the archived tuple is found again by the same query.
    """
    ids = []
    for inst in sample.instances:
        box = inst.mask.bbox()
        if box is None:
            continue
        crop = sample.image.crop(box)
        local = BinaryMask.from_array(inst.mask.array[int(box.y):int(box.y2), int(box.x):int(box.x2)])
        if embedder is not None:
            vec = embedder(crop)
        elif inst.source_entry is not None and inst.source_entry in bank:
            vec = bank.get(inst.source_entry).embedding
        else:
            raise ValueError("instance has no source entry and no embedder was given")
        lineage = {**sample.lineage, "source_entry": inst.source_entry}
        entry = MemoryEntry.create(crop, local, inst.category, inst.text, vec, Provenance.SYNTHETIC, lineage)
        if skip_existing and entry.id in bank:
            ids.append(entry.id)
            continue
        ids.append(bank.insert(entry))
    return ids

