"""Traditional segmenter: log compression, percentile clip, edge-preserving
smoothing, monogenic local energy and a per-column threshold scan, followed by
the shared LOWESS fit.

Runs either on an original B-scan (TWOPS) or on a cGAN pre-segmentation
(TWPS, the hybrid framework).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from octcascade import nn_core, postprocess
from octcascade.phantom import BScan
from octcascade.postprocess import InterfaceCurve, NoInterfaceError


@dataclass
class TradConfig:
    log_offset: float | None = 0.01
    percentile_clip: tuple = (1.0, 99.0)
    median_size: int = 5
    wavelength_px: float = 8.0
    sigma_ratio: float = 0.55
    energy_threshold: float = 95.0
    fit_fraction: float = 0.1
    fit_iterations: int = 2

    def validate(self) -> None:
        lo, hi = self.percentile_clip
        if not 0 <= lo < hi <= 100:
            raise nn_core.ConfigError("percentile_clip must satisfy 0 <= low < high <= 100")
        if self.wavelength_px <= 2:
            raise nn_core.ConfigError("log-Gabor wavelength must exceed 2 px (Nyquist)")
        if not 0 < self.sigma_ratio < 1:
            raise nn_core.ConfigError("sigma_ratio must lie in (0, 1)")
        if self.log_offset is not None and self.log_offset <= 0:
            raise nn_core.ConfigError("log_offset must be positive (or null to disable)")
        if not 0 <= self.energy_threshold < 100:
            raise nn_core.ConfigError("energy_threshold percentile must lie in [0, 100)")


def monogenic_filters(shape, wavelength_px: float, sigma_ratio: float):
    """Frequency responses of the log-Gabor band-pass and the two Riesz kernels."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    f0 = 1.0 / wavelength_px
    log_gabor = np.exp(-(np.log(radius / f0) ** 2) / (2 * np.log(sigma_ratio) ** 2))
    log_gabor[0, 0] = 0.0
    riesz_x = 1j * fx / radius
    riesz_y = 1j * fy / radius
    return log_gabor, riesz_x, riesz_y


def _pad_width(shape, wavelength_px: float) -> int:
    return int(min(min(shape) - 1, np.ceil(3 * wavelength_px)))


def monogenic_local_energy(image, wavelength_px: float = 8.0, sigma_ratio: float = 0.55) -> np.ndarray:
    """Per-pixel local energy ``sqrt(even**2 + odd_x**2 + odd_y**2)``.

    The image is reflect-padded before the FFT so image borders do not
    register as edges.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise ValueError("image must be a finite 2-D array")
    if wavelength_px >= min(img.shape):
        raise nn_core.ConfigError(
            f"log-Gabor wavelength {wavelength_px} px does not fit a {img.shape} image")
    pad = _pad_width(img.shape, wavelength_px)
    padded = np.pad(img, pad, mode="reflect")
    lg, rx, ry = monogenic_filters(padded.shape, wavelength_px, sigma_ratio)
    spec = np.fft.fft2(padded) * lg
    even = np.fft.ifft2(spec).real
    odd_x = np.fft.ifft2(spec * rx).real
    odd_y = np.fft.ifft2(spec * ry).real
    energy = np.sqrt(even**2 + odd_x**2 + odd_y**2)
    return energy[pad:pad + img.shape[0], pad:pad + img.shape[1]]


def preprocess(image, cfg: TradConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if cfg.log_offset is not None:
        # log compression turns speckle and lateral dropoff into additive terms
        img = np.log(np.clip(img, 0.0, None) + cfg.log_offset)
    lo, hi = np.percentile(img, cfg.percentile_clip)
    if hi <= lo:
        hi = lo + 1.0
    img = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    if cfg.median_size > 1:
        img = ndimage.median_filter(img, size=cfg.median_size, mode="reflect")
    return img


def _peak_row(col: np.ndarray, start: int) -> float:
    """Climb from ``start`` to the energy ridge and refine it to sub-pixel."""
    r = start
    n = col.size
    while r + 1 < n and col[r + 1] > col[r]:
        r += 1
    if 0 < r < n - 1:
        a, b, c = col[r - 1], col[r], col[r + 1]
        denom = a - 2 * b + c
        if denom < 0:
            return r + 0.5 * (a - c) / denom
    return float(r)


def raw_interface(image, cfg: TradConfig) -> np.ndarray:
    """Per column, the energy ridge reached from the topmost above-threshold pixel.

    The ridge of a step edge sits half a pixel above the first tissue row, so
    ``0.5`` is added. Columns that never cross the threshold are NaN.
    """
    cfg.validate()
    img = preprocess(image, cfg)
    energy = monogenic_local_energy(img, cfg.wavelength_px, cfg.sigma_ratio)
    thr = np.percentile(energy, cfg.energy_threshold)
    above = energy > max(thr, 1e-12)
    if not above.any():
        raise NoInterfaceError("no pixel exceeds the local-energy threshold")
    rows = np.full(img.shape[1], np.nan)
    for c in np.flatnonzero(above.any(axis=0)):
        start = int(above[:, c].argmax())
        rows[c] = _peak_row(energy[:, c], start) + 0.5
    return rows


def trad_segment(scan_or_preseg, cfg: TradConfig | None = None) -> InterfaceCurve:
    cfg = cfg or TradConfig()
    img = scan_or_preseg.pixels if isinstance(scan_or_preseg, BScan) else np.asarray(scan_or_preseg)
    raw = raw_interface(img, cfg)
    return postprocess.fit_curve(raw, cfg.fit_fraction, cfg.fit_iterations, height=img.shape[0])


def hybrid_segment(scan, generator, cfg: TradConfig | None = None, tile_width: int | None = None) -> InterfaceCurve:
    """Pre-segment with the generator, then run the traditional segmenter on the result only."""
    if generator is None:
        raise nn_core.ConfigError("hybrid segmentation needs a trained generator")
    from octcascade.pipeline import presegment_scan

    preseg = presegment_scan(generator, scan, tile_width)
    return trad_segment(preseg, cfg)
