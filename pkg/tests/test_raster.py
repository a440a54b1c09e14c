import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfm.errors import CorruptionError, EmptyInputError, FormatError, ShapeError
from gfm.raster import (CLEAR, CLOUD, NODATA, BandStats, Origin, QualityMask, RasterChip, TileId,
                        compute_band_stats, generate_synthetic_tile, read_chip, read_label_map,
                        read_quality_mask, standardize, standardize_array, unstandardize, write_chip,
                        write_label_map, write_quality_mask)

STAMPS3 = ("2022-03-01", "2022-03-17", "2022-04-02")
BANDS = ("B02", "B03", "B04", "B05", "B06", "B07")


def _chip(shape=(3, 6, 8, 8), seed=0, dtype=np.uint16, **kw):
    rng = np.random.default_rng(seed)
    data = rng.integers(1, 5000, size=shape).astype(dtype)
    stamps = tuple(f"2022-01-{d:02d}" for d in range(1, shape[0] + 1))
    bands = tuple(f"B{i:02d}" for i in range(shape[1]))
    return RasterChip(data, bands, stamps, **kw)


def test_full_size_chip_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.integers(0, 10000, size=(3, 6, 224, 224)).astype(np.uint16)
    origin = Origin(TileId(15, "S", "T15SXX"), 224, 448)
    chip = RasterChip(data, BANDS, STAMPS3, origin, nodata_value=0)
    write_chip(chip, tmp_path / "a.chip")
    back = read_chip(tmp_path / "a.chip")
    assert back == chip
    write_chip(back, tmp_path / "b.chip")
    assert (tmp_path / "a.chip").read_bytes() == (tmp_path / "b.chip").read_bytes()


def test_tiny_chip_values(tmp_path):
    chip = RasterChip(np.arange(4, dtype=np.uint16).reshape(1, 1, 2, 2), ("B02",), ("2022-01-01",))
    write_chip(chip, tmp_path / "c")
    assert read_chip(tmp_path / "c").data.ravel().tolist() == [0, 1, 2, 3]


def test_float_chip_with_nan_nodata(tmp_path):
    data = np.random.default_rng(0).normal(size=(1, 2, 4, 4)).astype(np.float32)
    data[0, 0, 0, 0] = np.nan
    chip = RasterChip(data, ("a", "b"), ("2022-01-01",), nodata_value=float("nan"))
    write_chip(chip, tmp_path / "f")
    assert read_chip(tmp_path / "f") == chip


def test_altered_magic_is_format_error(tmp_path):
    write_chip(_chip(), tmp_path / "c")
    raw = bytearray((tmp_path / "c").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "c").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_chip(tmp_path / "c")


def test_truncated_header_is_format_error(tmp_path):
    write_chip(_chip(), tmp_path / "c")
    (tmp_path / "c").write_bytes((tmp_path / "c").read_bytes()[:10])
    with pytest.raises(FormatError):
        read_chip(tmp_path / "c")


def test_truncated_payload_is_corruption(tmp_path):
    write_chip(_chip(), tmp_path / "c")
    (tmp_path / "c").write_bytes((tmp_path / "c").read_bytes()[:-3])
    with pytest.raises(CorruptionError):
        read_chip(tmp_path / "c")


def test_quality_mask_and_label_round_trip(tmp_path):
    codes = np.zeros((5, 7), np.uint8)
    codes[1, 2] = CLOUD
    codes[4, 6] = NODATA
    m = QualityMask(codes, "2022-05-05", Origin(TileId(3, "C", "T03C"), 0, 0))
    write_quality_mask(m, tmp_path / "m")
    assert read_quality_mask(tmp_path / "m") == m
    with pytest.raises(FormatError):
        read_chip(tmp_path / "m")
    labels = np.array([[0, 1], [2, 255]], np.uint8)
    write_label_map(labels, tmp_path / "l")
    assert np.array_equal(read_label_map(tmp_path / "l"), labels)


def test_chip_invariants():
    with pytest.raises(ShapeError):
        RasterChip(np.zeros((2, 2, 2)), ("a", "b"), ("2022-01-01",))
    with pytest.raises(ShapeError):
        RasterChip(np.zeros((1, 2, 2, 2)), ("a",), ("2022-01-01",))
    with pytest.raises(ValueError):
        RasterChip(np.zeros((2, 1, 2, 2)), ("a",), ("2022-01-02", "2022-01-01"))
    with pytest.raises(ValueError):
        QualityMask(np.full((2, 2), 7))


def test_window_tracks_origin_and_timestamps():
    chip = _chip((3, 2, 10, 12), origin=Origin(TileId(1, "C", "T"), 100, 50))
    w = chip.window(2, 3, 4, 5, timestamps=[chip.timestamps[1]])
    assert w.shape == (1, 2, 5, 4)
    assert np.array_equal(w.data[0], chip.data[1, :, 3:8, 2:6])
    assert (w.origin.x, w.origin.y) == (102, 53)
    with pytest.raises(ShapeError):
        chip.window(10, 0, 4, 4)


@settings(max_examples=40, deadline=None)
@given(t=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
       dtype=st.sampled_from([np.uint16, np.float32]), seed=st.integers(0, 2**16))
def test_round_trip_property(tmp_path_factory, t, c, h, w, dtype, seed):
    path = tmp_path_factory.mktemp("rt") / "x"
    chip = _chip((t, c, h, w), seed, dtype)
    write_chip(chip, path)
    assert read_chip(path) == chip


# -- band statistics

def test_stats_two_pixels():
    chip = RasterChip(np.array([2, 4], np.uint16).reshape(1, 1, 1, 2), ("b",), ("2022-01-01",))
    s = compute_band_stats([chip])
    assert s.mean[0] == 3.0 and s.std[0] == 1.0 and s.pixel_count == 2


def test_stats_all_nodata():
    chip = RasterChip(np.zeros((1, 2, 3, 3), np.uint16), ("a", "b"), ("2022-01-01",), nodata_value=0)
    with pytest.raises(EmptyInputError):
        compute_band_stats([chip])


def test_stats_match_two_pass_oracle():
    rng = np.random.default_rng(7)
    chips, masks, pix = [], [], []
    for i in range(10):
        chip = _chip((2, 3, 6 + i, 5), seed=i, nodata_value=1)
        chip.data[0, 1, 0, 0] = 1  # nodata in one band removes the pixel
        q = rng.choice([CLEAR, CLEAR, CLEAR, CLOUD], size=(2, 6 + i, 5)).astype(np.uint8)
        chips.append(chip)
        masks.append(q)
        keep = (q == CLEAR) & ~(chip.data == 1).any(axis=1)
        pix.append(np.moveaxis(chip.data, 1, 0)[:, keep].astype(np.float64))
    s = compute_band_stats(chips, masks)
    allpix = np.concatenate(pix, axis=1)
    mean = allpix.sum(axis=1) / allpix.shape[1]
    var = ((allpix - mean[:, None]) ** 2).sum(axis=1) / allpix.shape[1]
    np.testing.assert_allclose(s.mean, mean, rtol=1e-9)
    np.testing.assert_allclose(s.std, np.sqrt(var), rtol=1e-9)
    assert s.pixel_count == allpix.shape[1]


def test_stats_json_round_trip():
    s = BandStats([1.0, 2.0], [0.5, 0.25], 10)
    t = BandStats.from_dict(s.to_dict())
    assert np.array_equal(t.mean, s.mean) and np.array_equal(t.std, s.std)


def test_standardize_constant_band_and_zero_std():
    chip = RasterChip(np.full((1, 2, 3, 3), 7, np.uint16), ("a", "b"), ("2022-01-01",))
    out = standardize(chip, BandStats([7.0, 1.0], [0.0, 2.0], 9))
    assert np.all(out.data[:, 0] == 0)
    assert np.all(np.isfinite(out.data))
    with pytest.raises(ShapeError):
        standardize(chip, BandStats([1.0], [1.0], 1))


def test_standardize_inverse():
    chip = _chip((2, 3, 5, 5))
    s = compute_band_stats([chip])
    z = standardize_array(chip.data, s)
    np.testing.assert_allclose(unstandardize(z, s), chip.data, atol=1e-5 * chip.data.max())
    assert np.array_equal(standardize(chip, s).data, z)


# -- synthetic tiles

def test_synthetic_determinism_and_clear():
    a, ma = generate_synthetic_tile(4, 64, 3, 0.0)
    b, mb = generate_synthetic_tile(4, 64, 3, 0.0)
    assert a == b and all(x == y for x, y in zip(ma, mb))
    assert all(np.all(m.codes == CLEAR) for m in ma)
    assert a.data.dtype == np.uint16 and a.shape == (3, 6, 64, 64)


def test_synthetic_cloud_fraction():
    _, masks = generate_synthetic_tile(11, 256, 1, 0.5)
    frac = float(np.mean(masks[0].codes == CLOUD))
    assert 0.4 <= frac <= 0.6


def test_synthetic_bad_fraction_argument():
    with pytest.raises(ValueError):
        generate_synthetic_tile(0, 64, 1, 1.5)
