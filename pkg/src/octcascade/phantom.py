"""Synthetic anterior-segment B-scan phantoms with known interface ground truth.

Tissue below the interface is a constant base intensity modulated by unit-mean
gamma speckle and a lateral SNR dropoff; the region above carries background,
additive Gaussian specular bands and optional saturated (washed-out) columns.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INTERFACE_KINDS = ("quadratic-arc", "piecewise-flat-limbal", "linear-tilt")

# Gaussian FWHM -> standard deviation
_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    """Parameters of one synthetic B-scan.

    ``interface_params`` depends on ``interface_kind`` (all in pixels):

    * quadratic-arc: ``(apex_row, apex_col, curvature)``;
      ``y = apex_row + curvature * (x - apex_col)**2``
    * piecewise-flat-limbal: ``(left_row, right_row, junction_col, ramp_width)``
    * linear-tilt: ``(row_at_col0, slope)``

    ``artifact_bands`` holds ``(center_column, fwhm_columns, amplitude)`` triples.
    """

    width: int = 256
    height: int = 1024
    interface_kind: str = "quadratic-arc"
    interface_params: tuple = (200.0, 128.0, 0.004)
    tissue_base_intensity: float = 0.6
    background_intensity: float = 0.05
    speckle_contrast: float = 0.0
    artifact_bands: list = field(default_factory=list)
    snr_dropoff_rate: float = 0.0
    saturation_columns: list = field(default_factory=list)
    seed: int = 0
    axial_spacing_um: float = 3.4
    lateral_spacing_um: float = 6.0
    id: str = "phantom"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["interface_params"] = list(self.interface_params)
        d["artifact_bands"] = [list(b) for b in self.artifact_bands]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["interface_params"] = tuple(d.get("interface_params", ()))
        d["artifact_bands"] = [tuple(b) for b in d.get("artifact_bands", [])]
        return cls(**d)


@dataclass
class BScan:
    pixels: np.ndarray
    axial_spacing_um: float = 1.0
    lateral_spacing_um: float = 1.0
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"B-scan must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("B-scan contains non-finite intensities")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("B-scan intensities must lie in [0, 1]")
        if self.axial_spacing_um <= 0 or self.lateral_spacing_um <= 0:
            raise ValueError("pixel spacings must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class AnnotationCurve:
    rows: np.ndarray
    band_halfwidth_px: float = 2.5
    id: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.rows.ndim != 1:
            raise ValueError("annotation rows must be 1-D (one row per column)")

    @property
    def width(self) -> int:
        return self.rows.shape[0]

    def validate(self, height: int) -> None:
        if self.rows.size and (self.rows.min() < 0 or self.rows.max() >= height):
            raise ValueError(f"annotation rows must lie in [0, {height})")


def interface_profile(spec: PhantomSpec) -> np.ndarray:
    """Real-valued interface row for every column."""
    x = np.arange(spec.width, dtype=np.float64)
    p = tuple(float(v) for v in spec.interface_params)
    kind = spec.interface_kind
    if kind == "quadratic-arc":
        if len(p) != 3:
            raise PhantomError("quadratic-arc needs (apex_row, apex_col, curvature)")
        apex_row, apex_col, curv = p
        return apex_row + curv * (x - apex_col) ** 2
    if kind == "piecewise-flat-limbal":
        if len(p) != 4:
            raise PhantomError("piecewise-flat-limbal needs (left_row, right_row, junction_col, ramp_width)")
        left, right, junction, ramp = p
        if ramp <= 0:
            return np.where(x < junction, left, right)
        t = np.clip((x - (junction - ramp / 2.0)) / ramp, 0.0, 1.0)
        return left + (right - left) * t
    if kind == "linear-tilt":
        if len(p) != 2:
            raise PhantomError("linear-tilt needs (row_at_col0, slope)")
        return p[0] + p[1] * x
    raise PhantomError(f"unknown interface_kind {kind!r}")


def apex_column(spec: PhantomSpec) -> float:
    if spec.interface_kind == "quadratic-arc":
        return float(spec.interface_params[1])
    return (spec.width - 1) / 2.0


def validate_spec(spec: PhantomSpec) -> np.ndarray:
    """Check the spec and return the integer interface rows."""
    if spec.width < 1 or spec.height < 2:
        raise PhantomError("phantom must be at least 1 column by 2 rows")
    if not 0.0 <= spec.background_intensity < spec.tissue_base_intensity <= 1.0:
        raise PhantomError("need 0 <= background_intensity < tissue_base_intensity <= 1")
    if spec.speckle_contrast < 0:
        raise PhantomError("speckle_contrast must be >= 0")
    if spec.snr_dropoff_rate < 0:
        raise PhantomError("snr_dropoff_rate must be >= 0")
    for band in spec.artifact_bands:
        if len(band) != 3 or band[1] <= 0:
            raise PhantomError(f"bad artifact band {band!r}")
    for c in spec.saturation_columns:
        if not 0 <= int(c) < spec.width:
            raise PhantomError(f"saturation column {c} outside image")
    rows = np.rint(interface_profile(spec)).astype(np.int64)
    if rows.min() < 0 or rows.max() > spec.height - 1:
        raise PhantomError(
            f"interface leaves the image: rows span [{rows.min()}, {rows.max()}], height {spec.height}"
        )
    return rows


def _speckle(rng: np.random.Generator, contrast: float, shape) -> np.ndarray:
    # below ~1e-8 the gamma draw is 1 to double precision (and 1/contrast**2 overflows)
    if contrast < 1e-8:
        return np.ones(shape)
    k = 1.0 / contrast**2
    return rng.gamma(k, 1.0 / k, size=shape)


def generate_phantom(spec: PhantomSpec) -> tuple[BScan, AnnotationCurve]:
    rows = validate_spec(spec)
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    depth = np.arange(h)[:, None]
    below = depth >= rows[None, :]

    x = np.arange(w, dtype=np.float64)
    dropoff = np.exp(-spec.snr_dropoff_rate * np.abs(x - apex_column(spec)))
    bands = np.zeros(w)
    for center, fwhm, amp in spec.artifact_bands:
        sigma = fwhm * _FWHM_TO_SIGMA
        bands += amp * np.exp(-0.5 * ((x - center) / sigma) ** 2)

    speckle = _speckle(rng, spec.speckle_contrast, (h, w))
    tissue = spec.tissue_base_intensity * dropoff[None, :]
    background = spec.background_intensity + bands[None, :]
    img = np.where(below, tissue, background) * speckle
    img = np.clip(img, 0.0, 1.0)
    for c in spec.saturation_columns:
        img[: rows[int(c)] + 1, int(c)] = 1.0

    scan = BScan(img, spec.axial_spacing_um, spec.lateral_spacing_um, spec.id)
    return scan, AnnotationCurve(rows, id=spec.id)


def sample_specs(
    n: int,
    seed: int,
    width: int = 256,
    height: int = 1024,
    severity: str = "severe",
    prefix: str = "ph",
    scans_per_dataset: int = 5,
) -> list[PhantomSpec]:
    """Draw ``n`` random corneal/limbal-like phantom specs.

    severity: ``clean`` (no speckle, no artifacts), ``mild`` or ``severe``
    (strong speckle plus an off-centre specular band, occasionally a
    saturated column). Ids are ``{prefix}{dataset:02d}_{index:03d}`` so that
    consecutive scans group into pseudo-volumes.
    """
    if severity not in ("clean", "mild", "severe"):
        raise ValueError(f"unknown severity {severity!r}")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        kind = INTERFACE_KINDS[int(rng.integers(0, 3))] if i % 2 else "quadratic-arc"
        top = rng.uniform(0.15, 0.3) * height
        if kind == "quadratic-arc":
            apex_col = rng.uniform(0.35, 0.65) * (width - 1)
            span = max(apex_col, width - 1 - apex_col)
            drop = rng.uniform(0.1, 0.35) * height
            params = (top, apex_col, drop / span**2)
        elif kind == "piecewise-flat-limbal":
            params = (top, top + rng.uniform(0.05, 0.25) * height,
                      rng.uniform(0.3, 0.7) * width, rng.uniform(0.1, 0.3) * width)
        else:
            params = (top, rng.uniform(-0.15, 0.15) * height / width)
            end = params[0] + params[1] * (width - 1)
            if end < 0.1 * height:
                params = (top, 0.0)
        tissue = rng.uniform(0.45, 0.7)
        background = rng.uniform(0.03, 0.12)
        bands: list = []
        saturation: list = []
        speckle = 0.0
        dropoff = 0.0
        if severity != "clean":
            speckle = rng.uniform(0.3, 0.5) if severity == "mild" else rng.uniform(0.5, 0.8)
            dropoff = rng.uniform(0.0, 1.5) / width
        if severity == "mild" and rng.random() < 0.5:
            bands.append((rng.uniform(0.2, 0.8) * width, rng.uniform(0.03, 0.06) * width,
                          rng.uniform(0.1, 0.3)))
        if severity == "severe":
            side = 1 if rng.random() < 0.5 else -1
            center = (0.5 + side * rng.uniform(0.12, 0.3)) * width
            bands.append((center, rng.uniform(0.04, 0.1) * width, rng.uniform(0.5, 0.9)))
            if rng.random() < 0.5:
                bands.append((rng.uniform(0.1, 0.9) * width, rng.uniform(0.02, 0.05) * width,
                              rng.uniform(0.3, 0.6)))
            if rng.random() < 0.2:
                saturation.append(int(rng.integers(0, width)))
        specs.append(PhantomSpec(
            width=width, height=height, interface_kind=kind, interface_params=tuple(params),
            tissue_base_intensity=float(tissue), background_intensity=float(background),
            speckle_contrast=float(speckle), artifact_bands=bands, snr_dropoff_rate=float(dropoff),
            saturation_columns=saturation, seed=int(rng.integers(0, 2**31 - 1)),
            id=f"{prefix}{i // scans_per_dataset:02d}_{i:03d}",
        ))
    return specs


def generate_corpus(specs: Sequence[PhantomSpec], out_dir, n_train: int | None = None):
    """Write every phantom (16-bit PNG + annotation JSON) and a manifest.

    The first ``n_train`` specs are assigned to ``train``, the rest to
    ``test``; ``n_train=None`` puts everything in ``test``.
    """
    from octcascade import dataio

    out_dir = Path(out_dir)
    entries = []
    if specs:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    n_train = 0 if n_train is None else n_train
    for i, spec in enumerate(specs):
        scan, ann = generate_phantom(spec)
        img_rel = f"images/{spec.id}.png"
        ann_rel = f"annotations/{spec.id}.json"
        dataio.save_bscan_png(out_dir / img_rel, scan)
        dataio.save_annotation(out_dir / ann_rel, ann)
        entries.append(dataio.ManifestEntry(
            id=spec.id, image_path=img_rel, annotation_path=ann_rel,
            split="train" if i < n_train else "test",
            axial_spacing_um=spec.axial_spacing_um, lateral_spacing_um=spec.lateral_spacing_um,
        ))
    manifest = dataio.DatasetManifest(entries, root=out_dir)
    if entries:
        manifest.save(out_dir / "manifest.json")
    return manifest
