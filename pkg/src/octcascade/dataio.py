"""File formats, width-wise tiling and train/validation splitting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from octcascade.phantom import AnnotationCurve, BScan

SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    annotation_path: str
    split: str
    axial_spacing_um: float = 1.0
    lateral_spacing_um: float = 1.0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image_path,
            "annotation": self.annotation_path,
            "split": self.split,
            "axial_spacing_um": self.axial_spacing_um,
            "lateral_spacing_um": self.lateral_spacing_um,
        }


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"entry {e.id}: split must be one of {SPLITS}")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"entries": [e.to_json() for e in self.entries]}, indent=2))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = []
        for d in doc["entries"]:
            entries.append(ManifestEntry(
                id=d["id"], image_path=d["image"], annotation_path=d["annotation"], split=d["split"],
                axial_spacing_um=float(d.get("axial_spacing_um", 1.0)),
                lateral_spacing_um=float(d.get("lateral_spacing_um", 1.0)),
            ))
        manifest = cls(entries, root=path.parent)
        if check_files:
            for e in entries:
                for rel in (e.image_path, e.annotation_path):
                    if not manifest.resolve(rel).exists():
                        raise FileNotFoundError(f"manifest entry {e.id}: missing {manifest.resolve(rel)}")
        return manifest

    def load_entry(self, entry: ManifestEntry) -> tuple[BScan, AnnotationCurve]:
        scan = load_bscan_png(self.resolve(entry.image_path), id=entry.id,
                              axial_spacing_um=entry.axial_spacing_um,
                              lateral_spacing_um=entry.lateral_spacing_um)
        return scan, load_annotation(self.resolve(entry.annotation_path))


# --- images -----------------------------------------------------------------

def save_bscan_png(path, scan) -> None:
    pixels = scan.pixels if isinstance(scan, BScan) else np.asarray(scan)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        data = np.rint(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(data).save(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_bscan_png(path, id: str = "", axial_spacing_um: float = 1.0,
                   lateral_spacing_um: float = 1.0) -> BScan:
    data = np.array(Image.open(path))
    if data.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image")
    scale = 65535.0 if data.dtype == np.uint16 or data.max() > 255 else 255.0
    return BScan(data.astype(np.float64) / scale, axial_spacing_um, lateral_spacing_um,
                 id or Path(path).stem)


def save_mask_png(path, mask) -> None:
    """Binary masks as 8-bit PNG, 0 -> 0 and 1 -> 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask_png(path) -> np.ndarray:
    return (np.array(Image.open(path)) > 127).astype(np.uint8)


# --- curves -----------------------------------------------------------------

def save_annotation(path, ann: AnnotationCurve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "id": ann.id, "rows": [int(r) for r in ann.rows], "band_halfwidth_px": ann.band_halfwidth_px,
    }))


def load_annotation(path) -> AnnotationCurve:
    d = json.loads(Path(path).read_text())
    return AnnotationCurve(np.asarray(d["rows"], dtype=np.int64), float(d.get("band_halfwidth_px", 2.5)),
                           d.get("id", ""))


def save_curve(path, id: str, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"id": id, "rows": [float(r) for r in np.asarray(rows)]}))


def load_curve(path) -> tuple[str, np.ndarray]:
    d = json.loads(Path(path).read_text())
    return d["id"], np.asarray(d["rows"], dtype=np.float64)


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


# --- tiling -----------------------------------------------------------------

@dataclass
class Tile:
    pixels: np.ndarray
    source_id: str
    column_offset: int

    @property
    def width(self) -> int:
        return self.pixels.shape[-1]


def tile_offsets(width: int, tile_width: int) -> list[int]:
    """Left column of each tile; the last tile is right-aligned."""
    if tile_width <= 0:
        raise ValueError("tile_width must be positive")
    if width < tile_width:
        raise ValueError(f"image width {width} is narrower than tile width {tile_width}")
    n = math.ceil(width / tile_width)
    offsets = [i * tile_width for i in range(n - 1)]
    offsets.append(width - tile_width)
    return offsets


def slice_widthwise(scan, tile_width: int, source_id: str | None = None) -> list[Tile]:
    """Cut a B-scan (or any ``(..., H, W)`` array) into full-height tiles."""
    if isinstance(scan, BScan):
        pixels, sid = scan.pixels, scan.id
    else:
        pixels, sid = np.asarray(scan), ""
    sid = source_id if source_id is not None else sid
    return [Tile(pixels[..., off:off + tile_width].copy(), sid, off)
            for off in tile_offsets(pixels.shape[-1], tile_width)]


def reassemble(tiles: Sequence[Tile], full_width: int, blend: str = "overwrite-left-to-right") -> np.ndarray:
    if blend != "overwrite-left-to-right":
        raise ValueError(f"unsupported blend {blend!r}")
    if not tiles:
        raise ValueError("no tiles to reassemble")
    if len({t.source_id for t in tiles}) > 1:
        raise ValueError("tiles come from more than one source")
    lead = tiles[0].pixels.shape[:-1]
    out = np.zeros(lead + (full_width,), dtype=tiles[0].pixels.dtype)
    covered = np.zeros(full_width, dtype=bool)
    for t in sorted(tiles, key=lambda t: t.column_offset):
        if t.pixels.shape[:-1] != lead:
            raise ValueError("tiles have inconsistent heights")
        end = t.column_offset + t.width
        if t.column_offset < 0 or end > full_width:
            raise ValueError(f"tile at offset {t.column_offset} exceeds width {full_width}")
        out[..., t.column_offset:end] = t.pixels
        covered[t.column_offset:end] = True
    if not covered.all():
        gap = int(np.flatnonzero(~covered)[0])
        raise ValueError(f"tiles leave a coverage gap at column {gap}")
    return out


def split_train_validation(entries: Sequence, fraction_validation: float, seed: int):
    """Deterministic random partition; validation gets round(fraction * N) items.

    The validation count is clamped to [1, N-1] so both sides stay non-empty.
    """
    if not 0 < fraction_validation < 1:
        raise ValueError("fraction_validation must lie in (0, 1)")
    n = len(entries)
    if n < 2:
        raise ValueError("need at least two entries to split")
    n_val = int(math.floor(fraction_validation * n + 0.5))
    n_val = min(max(n_val, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    return train, val
