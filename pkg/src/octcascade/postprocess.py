"""Interface extraction from binary masks and LOWESS curve fitting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class InterfaceCurve:
    rows: np.ndarray
    fit_fraction: float = 0.1
    id: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("interface curve rows must be finite")

    @property
    def width(self) -> int:
        return self.rows.shape[0]


class NoInterfaceError(ValueError):
    """Raised when a mask or energy map yields no interface at all."""


def mask_from_probabilities(probs) -> np.ndarray:
    """``(2, H, W)`` softmax output -> binary mask; ties go to background."""
    probs = np.asarray(probs)
    if probs.ndim < 3 or probs.shape[-3] != 2:
        raise ValueError(f"expected (..., 2, H, W) probabilities, got {probs.shape}")
    return (probs[..., 0, :, :] > probs[..., 1, :, :]).astype(np.uint8)


def extract_interface(mask) -> np.ndarray:
    """Shallowest foreground row per column; NaN where a column has no foreground."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    fg = mask.astype(bool)
    has = fg.any(axis=0)
    if not has.any():
        raise NoInterfaceError("mask has no foreground pixels")
    rows = fg.argmax(axis=0).astype(np.float64)
    rows[~has] = np.nan
    return rows


def _tricube(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u**3) ** 3


def _bisquare(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u**2) ** 2


def _window(x0: float, x: np.ndarray, k: int) -> int:
    """Left end of the k-point contiguous neighbourhood of ``x0`` in sorted ``x``.

    The window slides right only while the next point on the right is
    strictly closer than the current leftmost one.
    """
    n = x.size
    if k >= n:
        return 0
    ok = x[k:] - x0 >= x0 - x[:n - k]
    return int(np.argmax(ok)) if ok.any() else n - k


def _local_linear(x0: float, x: np.ndarray, y: np.ndarray, w: np.ndarray, k: int) -> float:
    left = _window(x0, x, k)
    xs, ys = x[left:left + k], y[left:left + k]
    d = np.abs(xs - x0)
    h = max(x0 - xs[0], xs[-1] - x0)
    if h > 0:
        wts = _tricube(d / h) * w[left:left + k]
    else:
        wts = w[left:left + k].astype(np.float64)
    sw = wts.sum()
    if sw <= 0:
        wts = np.ones_like(xs)
        sw = wts.sum()
    xm = (wts * xs).sum() / sw
    ym = (wts * ys).sum() / sw
    sxx = (wts * (xs - xm) ** 2).sum()
    if sxx <= 1e-12 * max(1.0, h * h) * sw:
        return float(ym)
    slope = (wts * (xs - xm) * (ys - ym)).sum() / sxx
    return float(ym + slope * (x0 - xm))


def lowess(x, y, fraction: float = 0.1, iterations: int = 2, xvals=None) -> np.ndarray:
    """Locally weighted linear regression (Cleveland 1979).

    Each estimate uses the ``floor(fraction * n)`` nearest observations (at
    least two) with tricube distance weights; ``iterations`` robustness
    passes reweight by the bisquare of residuals over six median absolute
    residuals. When that
    median is zero (an exact fit apart from outliers) reweighting is
    undefined and the current fit is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    if not np.array_equal(order, np.arange(x.size)):
        fitted = np.empty_like(y)
        fitted[order] = lowess(x[order], y[order], fraction, iterations)
        return fitted if xvals is None else lowess(x[order], y[order], fraction, iterations, xvals)
    n = x.size
    if n < 2:
        raise ValueError("LOWESS needs at least two points")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = min(n, max(2, int(fraction * n + 1e-10)))
    robust = np.ones(n)
    for it in range(iterations + 1):
        fitted = np.array([_local_linear(xi, x, y, robust, k) for xi in x])
        if it == iterations:
            break
        resid = y - fitted
        s = np.median(np.abs(resid))
        scale = max(np.abs(y).max(), 1.0)
        if s <= 1e-12 * scale:
            break
        robust = _bisquare(resid / (6.0 * s))
    if xvals is None:
        return fitted
    xvals = np.asarray(xvals, dtype=np.float64)
    return np.array([_local_linear(xv, x, y, robust, k) for xv in xvals])


def fit_curve(raw_rows, fraction: float = 0.1, iterations: int = 2, height: int | None = None) -> InterfaceCurve:
    """Fit every column (missing ones included) from the non-missing raw rows.

    ``height`` clamps the result to ``[0, height - 1]``.
    """
    raw = np.asarray(raw_rows, dtype=np.float64)
    cols = np.arange(raw.size, dtype=np.float64)
    ok = np.isfinite(raw)
    if ok.sum() < 2:
        raise NoInterfaceError("too few columns with an interface to fit a curve")
    rows = lowess(cols[ok], raw[ok], fraction, iterations, xvals=cols)
    upper = np.inf if height is None else height - 1
    return InterfaceCurve(np.clip(rows, 0.0, upper), fraction)


def segment_mask(mask, fraction: float = 0.1, iterations: int = 2) -> InterfaceCurve:
    mask = np.asarray(mask)
    return fit_curve(extract_interface(mask), fraction, iterations, height=mask.shape[0])


def overlay_png(path, image, rows, color=(255, 0, 0)) -> None:
    """Grayscale image with the fitted contour drawn in ``color``."""
    from PIL import Image

    img = (np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([img] * 3, axis=-1)
    h = img.shape[0]
    r = np.clip(np.rint(np.asarray(rows)), 0, h - 1).astype(int)
    rgb[r, np.arange(r.size)] = color
    Image.fromarray(rgb).save(path)
