import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octcascade import phantom
from octcascade.phantom import BScan, PhantomError, PhantomSpec


def flat_spec(**kw):
    base = dict(width=32, height=40, interface_kind="linear-tilt", interface_params=(10.0, 0.0),
                tissue_base_intensity=0.6, background_intensity=0.05)
    base.update(kw)
    return PhantomSpec(**base)


def test_noise_free_flat_phantom():
    scan, ann = phantom.generate_phantom(flat_spec())
    assert np.all(ann.rows == 10)
    assert np.all(scan.pixels[:10] == 0.05)
    assert np.all(scan.pixels[10:] == 0.6)


def test_saturation_column():
    scan, ann = phantom.generate_phantom(flat_spec(saturation_columns=[5], speckle_contrast=0.5, seed=3))
    assert np.all(scan.pixels[: ann.rows[5] + 1, 5] == 1.0)


def test_determinism_and_seed_sensitivity():
    for s in range(10):
        spec = flat_spec(speckle_contrast=0.5, seed=s)
        a, _ = phantom.generate_phantom(spec)
        b, _ = phantom.generate_phantom(spec)
        assert np.array_equal(a.pixels, b.pixels)
        c, _ = phantom.generate_phantom(flat_spec(speckle_contrast=0.5, seed=s + 100))
        assert np.mean(a.pixels != c.pixels) >= 0.01


def test_invalid_specs():
    with pytest.raises(PhantomError):
        phantom.generate_phantom(flat_spec(interface_params=(50.0, 0.0)))
    with pytest.raises(PhantomError):
        phantom.generate_phantom(flat_spec(tissue_base_intensity=0.01))
    with pytest.raises(PhantomError):
        phantom.generate_phantom(flat_spec(interface_kind="spiral"))
    with pytest.raises(PhantomError):
        phantom.generate_phantom(flat_spec(saturation_columns=[99]))
    with pytest.raises(PhantomError):
        phantom.generate_phantom(flat_spec(interface_kind="quadratic-arc", interface_params=(1.0,)))


def test_interface_kinds():
    arc = phantom.interface_profile(PhantomSpec(width=9, height=50, interface_params=(10.0, 4.0, 0.5)))
    assert arc[4] == 10.0 and arc[0] == arc[8] == 18.0
    limb = phantom.interface_profile(PhantomSpec(width=10, height=50, interface_kind="piecewise-flat-limbal",
                                                 interface_params=(10.0, 20.0, 5.0, 0.0)))
    assert limb[:5].tolist() == [10.0] * 5 and limb[5:].tolist() == [20.0] * 5
    tilt = phantom.interface_profile(flat_spec(interface_params=(5.0, 0.5)))
    assert tilt[4] == 7.0


def test_bscan_validation():
    with pytest.raises(ValueError):
        BScan(np.array([[1.5]]))
    with pytest.raises(ValueError):
        BScan(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        BScan(np.zeros((2, 2)), axial_spacing_um=0)


def test_spec_dict_roundtrip():
    spec = flat_spec(artifact_bands=[(10.0, 3.0, 0.4)], seed=9)
    back = PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back == spec


def test_generate_corpus_counts(tmp_path):
    specs = phantom.sample_specs(3, 0, width=32, height=48)
    m = phantom.generate_corpus(specs, tmp_path, n_train=1)
    assert len(list((tmp_path / "images").iterdir())) == 3
    assert len(list((tmp_path / "annotations").iterdir())) == 3
    assert (tmp_path / "manifest.json").exists()
    assert [e.split for e in m.entries] == ["train", "test", "test"]


def test_generate_corpus_split_ratio(tmp_path):
    specs = phantom.sample_specs(50, 1, width=16, height=32, severity="clean")
    m = phantom.generate_corpus(specs, tmp_path, n_train=14)
    assert len(m.split("train")) == 14 and len(m.split("test")) == 36


def test_generate_corpus_empty(tmp_path):
    m = phantom.generate_corpus([], tmp_path / "c")
    assert m.entries == []
    assert not (tmp_path / "c").exists()


@pytest.mark.parametrize("severity", ["clean", "mild", "severe"])
def test_sample_specs_valid(severity):
    specs = phantom.sample_specs(20, 5, width=128, height=128, severity=severity)
    assert len({s.id for s in specs}) == 20
    for s in specs:
        scan, ann = phantom.generate_phantom(s)
        ann.validate(s.height)
        assert scan.pixels.shape == (128, 128)
    assert specs[0].id == "ph00_000" and specs[7].id == "ph01_007"
    with pytest.raises(ValueError):
        phantom.sample_specs(1, 0, severity="awful")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.3, 1.0), st.floats(0.0, 0.2), st.floats(0.0, 0.8),
       st.floats(0.0, 0.25))
def test_tissue_brighter_than_background(seed, tissue, background, speckle, amp_frac):
    # narrow band, mild dropoff: the band must not outweigh the tissue/background contrast
    spec = PhantomSpec(width=64, height=64, interface_kind="linear-tilt", interface_params=(20.0, 0.1),
                       tissue_base_intensity=tissue, background_intensity=background, speckle_contrast=speckle,
                       artifact_bands=[(32.0, 6.0, amp_frac * tissue)], snr_dropoff_rate=0.002, seed=seed)
    scan, ann = phantom.generate_phantom(spec)
    below = np.arange(64)[:, None] >= ann.rows[None, :]
    assert scan.pixels[below].mean() > scan.pixels[~below].mean()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(2, 60), st.floats(0.1, 1.0), st.floats(0.0, 0.09))
def test_noise_free_annotation_exact(width, height, tissue, background):
    row = height // 2
    spec = PhantomSpec(width=width, height=height, interface_kind="linear-tilt", interface_params=(float(row), 0.0),
                       tissue_base_intensity=tissue, background_intensity=background)
    scan, ann = phantom.generate_phantom(spec)
    first = (scan.pixels == tissue).argmax(axis=0)
    assert np.array_equal(first, ann.rows)
