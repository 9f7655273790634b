import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octcascade import dataio
from octcascade.dataio import DatasetManifest, ManifestEntry, Tile
from octcascade.phantom import AnnotationCurve, BScan


def test_tile_offsets_examples():
    assert dataio.tile_offsets(1000, 256) == [0, 256, 512, 744]
    assert dataio.tile_offsets(256, 256) == [0]
    assert dataio.tile_offsets(512, 256) == [0, 256]
    with pytest.raises(ValueError):
        dataio.tile_offsets(100, 256)
    with pytest.raises(ValueError):
        dataio.slice_widthwise(np.zeros((4, 10)), 11)


def test_reassemble_overlap_takes_right_tile():
    a = Tile(np.zeros((2, 256)), "s", 0)
    b = Tile(np.ones((2, 256)), "s", 200)
    out = dataio.reassemble([b, a], 456)
    assert out.shape == (2, 456)
    assert np.all(out[:, :200] == 0) and np.all(out[:, 200:] == 1)


def test_reassemble_errors():
    with pytest.raises(ValueError):
        dataio.reassemble([Tile(np.zeros((2, 4)), "s", 0)], 10)
    with pytest.raises(ValueError):
        dataio.reassemble([Tile(np.zeros((2, 4)), "a", 0), Tile(np.zeros((2, 4)), "b", 4)], 8)
    with pytest.raises(ValueError):
        dataio.reassemble([], 4)
    with pytest.raises(ValueError):
        dataio.reassemble([Tile(np.zeros((2, 4)), "s", 0)], 4, blend="mean")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 300))
def test_slice_reassemble_identity(seed, tile_width, extra):
    width = tile_width + extra
    img = np.random.default_rng(seed).random((3, width))
    tiles = dataio.slice_widthwise(BScan(img, id="x"), tile_width)
    assert all(t.width == tile_width and t.source_id == "x" for t in tiles)
    assert np.array_equal(dataio.reassemble(tiles, width), img)


def test_bscan_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((20, 30))
    dataio.save_bscan_png(tmp_path / "a.png", BScan(img))
    back = dataio.load_bscan_png(tmp_path / "a.png", id="a", axial_spacing_um=2.0)
    assert np.max(np.abs(back.pixels - img)) <= 0.5 / 65535 + 1e-12
    assert back.id == "a" and back.axial_spacing_um == 2.0


def test_mask_and_curve_roundtrip(tmp_path):
    mask = np.random.default_rng(1).integers(0, 2, (8, 9))
    dataio.save_mask_png(tmp_path / "m.png", mask)
    assert np.array_equal(dataio.load_mask_png(tmp_path / "m.png"), mask)
    ann = AnnotationCurve(np.array([1, 2, 3]), id="z")
    dataio.save_annotation(tmp_path / "a.json", ann)
    back = dataio.load_annotation(tmp_path / "a.json")
    assert back.id == "z" and back.rows.tolist() == [1, 2, 3] and back.band_halfwidth_px == 2.5
    dataio.save_curve(tmp_path / "c.json", "z", [1.5, 2.5])
    cid, rows = dataio.load_curve(tmp_path / "c.json")
    assert cid == "z" and rows.tolist() == [1.5, 2.5]


def test_manifest_roundtrip_and_missing_file(tmp_path):
    dataio.save_bscan_png(tmp_path / "i.png", np.zeros((4, 4)))
    dataio.save_annotation(tmp_path / "a.json", AnnotationCurve(np.zeros(4, dtype=int)))
    m = DatasetManifest([ManifestEntry("x", "i.png", "a.json", "test", 3.4, 6.0)], root=tmp_path)
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.entries == m.entries
    scan, ann = back.load_entry(back.entries[0])
    assert scan.id == "x" and scan.lateral_spacing_um == 6.0 and ann.width == 4
    (tmp_path / "i.png").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "manifest.json")


def test_manifest_validation():
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("x", "a", "b", "train"), ManifestEntry("x", "c", "d", "test")])
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("x", "a", "b", "holdout")])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 0.5), st.integers(0, 1000))
def test_split_partition(n, frac, seed):
    items = list(range(n))
    train, val = dataio.split_train_validation(items, frac, seed)
    assert sorted(train + val) == items
    assert len(val) == min(max(int(np.floor(frac * n + 0.5)), 1), n - 1)
    assert dataio.split_train_validation(items, frac, seed) == (train, val)


def test_split_examples_and_errors():
    train, val = dataio.split_train_validation(list(range(50)), 0.1, 0)
    assert len(train) == 45 and len(val) == 5
    with pytest.raises(ValueError):
        dataio.split_train_validation([1], 0.1, 0)
    with pytest.raises(ValueError):
        dataio.split_train_validation([1, 2], 1.0, 0)
