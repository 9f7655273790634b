"""Training targets (gold pre-segmentation, weight mask, labels) and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from octcascade.phantom import AnnotationCurve, BScan

DEFAULT_SHIFT_PX = 50

GEOMETRIC = ("flip", "crop", "affine", "elastic")
PHOTOMETRIC = ("gamma", "gaussian_blur", "median_blur", "bilateral_blur", "gaussian_noise")


def _rows(ann) -> np.ndarray:
    return np.asarray(ann.rows if isinstance(ann, AnnotationCurve) else ann, dtype=np.int64)


def _pixels(scan) -> np.ndarray:
    return scan.pixels if isinstance(scan, BScan) else np.asarray(scan, dtype=np.float64)


def make_binary_label(ann, shape) -> np.ndarray:
    """1 at and below the interface, 0 above it."""
    rows = _rows(ann)
    h, w = shape
    if rows.shape != (w,):
        raise ValueError(f"annotation has {rows.shape[0]} columns, image has {w}")
    return (np.arange(h)[:, None] >= rows[None, :]).astype(np.uint8)


def make_gold_preseg(scan, ann) -> np.ndarray:
    """Zero every pixel strictly above the annotated interface."""
    pixels = _pixels(scan)
    return pixels * make_binary_label(ann, pixels.shape)


def make_weight_mask(ann, shape, shift_px: int = DEFAULT_SHIFT_PX) -> np.ndarray:
    """Binary weight ``w``: 1 above the annotation shifted down by ``shift_px``.

    The shifted contour is clamped to the last row, so the bottom row is
    always foreground (0).
    """
    if shift_px < 0:
        raise ValueError("shift_px must be >= 0")
    rows = _rows(ann)
    h, w = shape
    if rows.shape != (w,):
        raise ValueError(f"annotation has {rows.shape[0]} columns, image has {w}")
    shifted = np.minimum(rows + int(shift_px), h - 1)
    return (np.arange(h)[:, None] < shifted[None, :]).astype(np.uint8)


def one_hot_label(label: np.ndarray) -> np.ndarray:
    """``(H, W)`` binary label -> ``(2, H, W)`` with channel 0 = foreground."""
    label = np.asarray(label, dtype=np.float32)
    return np.stack([label, 1.0 - label])


# --- augmentation -----------------------------------------------------------

@dataclass
class AugmentationPolicy:
    kind: str = "tisn-full"
    seed: int = 0
    flip_prob: float = 0.5
    gamma_range: tuple = (0.7, 1.5)
    elastic_sigma: float = 8.0
    elastic_alpha: float = 4.0
    blur_sigma_range: tuple = (0.5, 1.5)
    median_size: int = 3
    bilateral_sigma_spatial: float = 1.5
    bilateral_sigma_range: float = 0.1
    noise_std_range: tuple = (0.0, 0.05)
    crop_fraction_range: tuple = (0.8, 1.0)
    affine_rotation_deg: float = 5.0
    affine_scale_range: tuple = (0.9, 1.1)
    affine_shift_px: float = 4.0
    transforms: list | None = None
    transform_prob: float = 0.5

    def __post_init__(self):
        if self.kind == "cgan-flip-only":
            self.transforms = ["flip"]
        elif self.kind == "tisn-full":
            if self.transforms is None:
                self.transforms = list(GEOMETRIC + PHOTOMETRIC)
        else:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        unknown = [t for t in self.transforms if t not in GEOMETRIC + PHOTOMETRIC]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}")


def _warp(arr: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")


def _affine_coords(shape, rng, policy: AugmentationPolicy) -> np.ndarray:
    h, w = shape
    theta = np.deg2rad(rng.uniform(-policy.affine_rotation_deg, policy.affine_rotation_deg))
    s = rng.uniform(*policy.affine_scale_range)
    ty, tx = rng.uniform(-policy.affine_shift_px, policy.affine_shift_px, size=2)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    c, sn = np.cos(theta), np.sin(theta)
    src_y = (c * dy - sn * dx) / s + cy + ty
    src_x = (sn * dy + c * dx) / s + cx + tx
    return np.stack([src_y, src_x])


def _crop_coords(shape, rng, policy: AugmentationPolicy) -> np.ndarray:
    # crop a sub-window and resample it back to the full tile size
    h, w = shape
    f = rng.uniform(*policy.crop_fraction_range)
    ch, cw = f * (h - 1), f * (w - 1)
    y0 = rng.uniform(0, (h - 1) - ch)
    x0 = rng.uniform(0, (w - 1) - cw)
    ys = y0 + np.linspace(0, ch, h)
    xs = x0 + np.linspace(0, cw, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, xx])


def _elastic_coords(shape, rng, policy: AugmentationPolicy) -> np.ndarray:
    h, w = shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), policy.elastic_sigma)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), policy.elastic_sigma)
    for d in (dy, dx):
        peak = np.abs(d).max()
        if peak > 0:
            d *= policy.elastic_alpha / peak
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([yy + dy, xx + dx])


def _bilateral(img: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    radius = max(1, int(np.ceil(2 * sigma_s)))
    padded = np.pad(img, radius, mode="reflect")
    h, w = img.shape
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            wgt = np.exp(-(dy * dy + dx * dx) / (2 * sigma_s**2) - (shifted - img) ** 2 / (2 * sigma_r**2))
            num += wgt * shifted
            den += wgt
    return num / den


def augment(image: np.ndarray, targets: dict | None = None, policy: AugmentationPolicy | None = None,
            rng: np.random.Generator | None = None, annotation=None, force: list | None = None):
    """Apply one random draw of ``policy`` to an image and its aligned targets.

    ``targets`` maps names to ``(H, W)`` arrays; names ending in ``mask`` or
    ``label`` are resampled with nearest-neighbour interpolation, everything
    else bilinearly. Geometric transforms hit the image and all targets,
    photometric ones only the image. When ``annotation`` rows are given they
    are carried through the geometry and returned re-sampled per column.

    ``force`` lists transforms to apply unconditionally (mainly for tests);
    otherwise each transform in the policy fires with ``transform_prob``
    (``flip_prob`` for flips).

    Returns ``(image, targets, annotation_rows_or_None)``.
    """
    policy = policy or AugmentationPolicy()
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    image = np.asarray(image, dtype=np.float64)
    targets = {k: np.asarray(v) for k, v in (targets or {}).items()}
    for k, v in targets.items():
        if v.shape != image.shape:
            raise ValueError(f"target {k!r} shape {v.shape} != image shape {image.shape}")
    if force is not None:
        unknown = [t for t in force if t not in GEOMETRIC + PHOTOMETRIC]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}")
    h, w = image.shape
    ann_label = None
    if annotation is not None:
        ann_label = make_binary_label(_rows(annotation), image.shape)

    def fires(name: str) -> bool:
        if force is not None:
            return name in force
        if name not in policy.transforms:
            return False
        p = policy.flip_prob if name == "flip" else policy.transform_prob
        return rng.random() < p

    def nearest(name: str) -> bool:
        return name.endswith("mask") or name.endswith("label")

    for name in GEOMETRIC:
        if not fires(name):
            continue
        if name == "flip":
            image = image[:, ::-1].copy()
            targets = {k: v[:, ::-1].copy() for k, v in targets.items()}
            if ann_label is not None:
                ann_label = ann_label[:, ::-1].copy()
            continue
        coords = {"crop": _crop_coords, "affine": _affine_coords, "elastic": _elastic_coords}[name](
            image.shape, rng, policy)
        image = _warp(image, coords, 1)
        targets = {k: _warp(v.astype(np.float64), coords, 0 if nearest(k) else 1).astype(v.dtype)
                   for k, v in targets.items()}
        if ann_label is not None:
            ann_label = _warp(ann_label.astype(np.float64), coords, 0).astype(np.uint8)

    for name in PHOTOMETRIC:
        if not fires(name):
            continue
        if name == "gamma":
            g = rng.uniform(*policy.gamma_range)
            image = np.clip(image, 0.0, 1.0) ** g
        elif name == "gaussian_blur":
            image = ndimage.gaussian_filter(image, rng.uniform(*policy.blur_sigma_range))
        elif name == "median_blur":
            image = ndimage.median_filter(image, size=policy.median_size, mode="reflect")
        elif name == "bilateral_blur":
            image = _bilateral(image, policy.bilateral_sigma_spatial, policy.bilateral_sigma_range)
        elif name == "gaussian_noise":
            image = image + rng.normal(0.0, rng.uniform(*policy.noise_std_range), size=image.shape)
        image = np.clip(image, 0.0, 1.0)

    rows = None
    if ann_label is not None:
        fg = ann_label.astype(bool)
        rows = np.where(fg.any(axis=0), fg.argmax(axis=0), h - 1).astype(np.int64)
    return image, targets, rows


def gamma_adjust(image: np.ndarray, exponent: float) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** exponent


def corrupt_preseg(image, preseg, ann, rng: np.random.Generator, max_span_frac: float = 0.4,
                   jitter_px: int = 0) -> np.ndarray:
    """Imitate an imperfect pre-segmentation of ``image``.

    Background from ``image`` is leaked back above the interface over a
    random column span, as if part of an artifact survived. With
    ``jitter_px > 0`` the cut edge is also moved by a smooth random offset of
    up to ``jitter_px`` rows per column. The annotation (and hence the label)
    is left unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    out = np.array(preseg, dtype=np.float64, copy=True)
    rows = _rows(ann)
    h, w = out.shape
    yy = np.arange(h)[:, None]
    if jitter_px > 0:
        offs = ndimage.gaussian_filter1d(rng.uniform(-1, 1, w), max(1.0, w / 16), mode="nearest")
        peak = np.abs(offs).max()
        if peak > 0:
            offs *= rng.uniform(0, jitter_px) / peak
        cut = np.clip(rows + np.rint(offs).astype(np.int64), 0, h)
        out = np.where(yy >= cut[None, :], image, 0.0)
    span = int(rng.integers(1, min(w, max(1, int(round(max_span_frac * w)))) + 1))
    c0 = int(rng.integers(0, w - span + 1))
    top = int(rng.integers(0, max(1, int(rows[c0:c0 + span].min()) + 1)))
    gain = rng.uniform(0.3, 1.0)
    above = (yy >= top) & (yy < rows[None, c0:c0 + span])
    out[:, c0:c0 + span] = np.where(above, gain * image[:, c0:c0 + span], out[:, c0:c0 + span])
    return out


@dataclass
class TargetSet:
    """Per-tile training arrays for both stages."""

    images: list = field(default_factory=list)
    presegs: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def build_targets(scans, annotations, tile_width: int, shift_px: int = DEFAULT_SHIFT_PX) -> TargetSet:
    """Tile every scan and build its gold pre-segmentation, weight mask and label."""
    from octcascade.dataio import tile_offsets

    out = TargetSet()
    for scan, ann in zip(scans, annotations):
        pixels = _pixels(scan)
        rows = _rows(ann)
        sid = scan.id if isinstance(scan, BScan) else ""
        for off in tile_offsets(pixels.shape[1], tile_width):
            img = pixels[:, off:off + tile_width]
            r = rows[off:off + tile_width]
            out.images.append(img.copy())
            out.presegs.append(make_gold_preseg(img, r))
            out.weights.append(make_weight_mask(r, img.shape, shift_px))
            out.labels.append(make_binary_label(r, img.shape))
            out.rows.append(r.copy())
            out.ids.append(f"{sid}@{off}")
    return out
