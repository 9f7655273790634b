import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from octcascade import dataprep, phantom, tradseg
from octcascade.nn_core import ConfigError
from octcascade.phantom import PhantomSpec
from octcascade.postprocess import NoInterfaceError
from octcascade.tradseg import TradConfig


def spatial_energy(img, wavelength, sigma_ratio):
    """Local energy by direct circular convolution with the filters' impulse responses."""
    pad = int(min(min(img.shape) - 1, np.ceil(3 * wavelength)))
    p = np.pad(img, pad, mode="reflect")
    filters = tradseg.monogenic_filters(p.shape, wavelength, sigma_ratio)
    lg = filters[0]
    kernels = [np.fft.ifft2(lg).real, np.fft.ifft2(lg * filters[1]).real, np.fft.ifft2(lg * filters[2]).real]
    n, m = p.shape
    outs = []
    for k in kernels:
        acc = np.zeros_like(p)
        for u in range(n):
            for v in range(m):
                if k[u, v] != 0:
                    acc += k[u, v] * np.roll(np.roll(p, u, axis=0), v, axis=1)
        outs.append(acc)
    e = np.sqrt(sum(o**2 for o in outs))
    return e[pad:pad + img.shape[0], pad:pad + img.shape[1]]


def step_image(edge_row=16, size=32):
    img = np.zeros((size, size))
    img[edge_row:] = 1.0
    return img


def test_energy_matches_spatial_convolution():
    img = step_image() + 0.05 * np.random.default_rng(0).random((32, 32))
    fast = tradseg.monogenic_local_energy(img, 8.0, 0.55)
    assert np.allclose(fast, spatial_energy(img, 8.0, 0.55), atol=1e-9)


def test_energy_peaks_at_step_edge():
    e = tradseg.monogenic_local_energy(step_image(16), 8.0, 0.55)
    assert np.all(np.abs(e.argmax(axis=0) - 15.5) <= 1.0)


def test_energy_constant_image_and_nonnegative():
    assert np.max(tradseg.monogenic_local_energy(np.full((32, 32), 0.7))) < 1e-12
    e = tradseg.monogenic_local_energy(np.random.default_rng(1).random((32, 40)))
    assert e.min() >= 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_energy_invariant_to_constant_offset(seed, c):
    img = np.random.default_rng(seed).random((24, 24))
    a = tradseg.monogenic_local_energy(img, 6.0, 0.55)
    b = tradseg.monogenic_local_energy(img + c, 6.0, 0.55)
    assert np.allclose(a, b, atol=1e-9)


def test_energy_errors():
    with pytest.raises(ConfigError):
        tradseg.monogenic_local_energy(np.zeros((8, 8)), wavelength_px=8.0)
    with pytest.raises(ValueError):
        tradseg.monogenic_local_energy(np.full((16, 16), np.nan))


def test_config_validation():
    for bad in (dict(percentile_clip=(50, 10)), dict(percentile_clip=(0, 101)), dict(wavelength_px=2),
                dict(sigma_ratio=1.5), dict(log_offset=0.0), dict(energy_threshold=100)):
        with pytest.raises(ConfigError):
            TradConfig(**bad).validate()


@pytest.mark.parametrize("kind,params", [
    ("linear-tilt", (40.0, 0.2)),
    ("quadratic-arc", (30.0, 64.0, 0.01)),
    ("linear-tilt", (60.0, 0.0)),
])
def test_noise_free_phantom_within_one_pixel(kind, params):
    spec = PhantomSpec(width=128, height=128, interface_kind=kind, interface_params=params)
    scan, ann = phantom.generate_phantom(spec)
    curve = tradseg.trad_segment(scan)
    err = np.abs(curve.rows - ann.rows)
    # reflect padding folds a steep boundary into a cusp at the image border
    assert np.max(err[3:-3]) <= 1.0
    assert np.max(err) <= 3.0


def test_gold_preseg_within_annotation_band():
    specs = phantom.sample_specs(12, 11, width=128, height=128, severity="severe")
    for spec in specs:
        scan, ann = phantom.generate_phantom(spec)
        curve = tradseg.trad_segment(dataprep.make_gold_preseg(scan, ann))
        assert np.max(np.abs(curve.rows - ann.rows)) <= ann.band_halfwidth_px, spec.id


def test_all_zero_image_fails():
    with pytest.raises(NoInterfaceError):
        tradseg.trad_segment(np.zeros((64, 64)))


class Identity(torch.nn.Module):
    """Passes the (replicated) image straight through in the generator's output range."""

    def __init__(self):
        super().__init__()
        self.anchor = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        return x[:, :1]


def test_identity_generator_reduces_hybrid_to_traditional():
    for spec in phantom.sample_specs(4, 3, width=128, height=128, severity="severe"):
        scan, _ = phantom.generate_phantom(spec)
        a = tradseg.trad_segment(scan)
        b = tradseg.hybrid_segment(scan, Identity(), tile_width=64)
        assert np.allclose(a.rows, b.rows, atol=1e-6)


def test_hybrid_needs_generator():
    with pytest.raises(ConfigError):
        tradseg.hybrid_segment(np.zeros((8, 8)), None)
