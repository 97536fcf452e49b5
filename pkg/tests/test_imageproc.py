import numpy as np
import pytest

from duvdiff.errors import DataError, NumericsError
from duvdiff.imageproc import (RawImage, crop, despike, normalize_unity,
                               rotate, rss, subtract_background,
                               subtract_plane, vertical_smooth)
from duvdiff import imgio


def make(data, pitch=0.33e-6):
    return RawImage(np.asarray(data, float), pixel_pitch=pitch)


# -- validation --------------------------------------------------------------

def test_raw_image_rejects_non_finite():
    bad = np.ones((4, 4))
    bad[1, 2] = np.nan
    with pytest.raises(DataError):
        make(bad)


def test_raw_image_rejects_wrong_rank():
    with pytest.raises(DataError):
        make(np.ones(16))


# -- background subtraction --------------------------------------------------

def test_subtract_background_uses_mean_of_bright_frames(rng):
    sig = rng.uniform(1.0, 2.0, (8, 8))
    b1 = rng.uniform(0.0, 1.0, (8, 8))
    b2 = rng.uniform(0.0, 1.0, (8, 8))
    out = subtract_background(make(sig), make(b1), make(b2))
    np.testing.assert_allclose(out.data, sig - (b1 + b2) / 2.0)


def test_subtract_background_dim_mismatch():
    with pytest.raises(DataError):
        subtract_background(make(np.ones((4, 4))), make(np.ones((5, 4))))


# -- despike -----------------------------------------------------------------

def test_despike_matches_quantile_clamp_oracle(rng):
    data = rng.normal(0.0, 1.0, (60, 60))
    data[5, 5] = 100.0
    data[50, 7] = -100.0
    q = 0.01
    out = despike(make(data), q=q)
    lo, hi = np.quantile(data, [q, 1.0 - q])
    np.testing.assert_allclose(out.data, np.clip(data, lo, hi))
    assert out.data.max() <= hi
    assert out.data.min() >= lo


def test_despike_tiny_quantile_leaves_clean_data_untouched():
    data = np.fromfunction(lambda i, j: np.sin(i) + j, (16, 16))
    out = despike(make(data), q=1e-9)
    np.testing.assert_allclose(out.data, data, atol=1e-5)


def test_despike_rejects_bad_quantile():
    with pytest.raises(DataError):
        despike(make(np.ones((4, 4))), q=0.0)
    with pytest.raises(DataError):
        despike(make(np.ones((4, 4))), q=0.5)


# -- plane subtraction -------------------------------------------------------

def test_subtract_plane_removes_exact_plane(rng):
    h, w = 40, 30
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    plane = 0.3 + 0.02 * i - 0.05 * j
    blob = np.zeros((h, w))
    blob[15:25, 10:20] = 5.0
    mask = blob == 0.0  # fit only outside the signal region
    out = subtract_plane(make(plane + blob), mask)
    np.testing.assert_allclose(out.data, blob, atol=1e-9)


def test_subtract_plane_requires_coverage():
    mask = np.zeros((20, 20), dtype=bool)
    mask[0, 0] = True
    with pytest.raises(DataError):
        subtract_plane(make(np.ones((20, 20))), mask)


# -- rotation ----------------------------------------------------------------

def test_rotate_zero_is_identity(rng):
    data = rng.uniform(0.0, 1.0, (32, 32))
    out = rotate(make(data), theta_deg=0.0)
    np.testing.assert_allclose(out.data, data)
    assert out.valid.all()


def test_rotate_round_trip_recovers_interior(rng):
    data = np.zeros((64, 64))
    data[28:36, 28:36] = 1.0
    once = rotate(make(data), theta_deg=0.4)
    back = rotate(once, theta_deg=-0.4)
    inner = (slice(8, 56), slice(8, 56))
    assert np.abs(back.data[inner] - data[inner]).max() < 0.05


def test_rotate_moves_centroid_as_expected():
    data = np.zeros((101, 101))
    data[50, 90] = 1.0  # 40 px right of center
    out = rotate(make(data), theta_deg=1.0)
    i, j = np.meshgrid(np.arange(101), np.arange(101), indexing="ij")
    ci = (i * out.data).sum() / out.data.sum()
    # rotating by +1 deg displaces a point 40 px from center by ~0.7 px
    assert abs(ci - 50.0) == pytest.approx(
        40.0 * np.sin(np.deg2rad(1.0)), abs=0.3)


def test_rotate_rejects_large_angles():
    with pytest.raises(DataError):
        rotate(make(np.ones((8, 8))), theta_deg=10.0)


# -- crop, smooth, normalize -------------------------------------------------

def test_crop_extracts_rect(rng):
    data = rng.uniform(0.0, 1.0, (20, 30))
    out = crop(make(data), (2, 3, 10, 12))
    np.testing.assert_allclose(out.data, data[2:12, 3:15])


def test_crop_rejects_out_of_range():
    with pytest.raises(DataError):
        crop(make(np.ones((10, 10))), (5, 5, 10, 2))


def test_vertical_smooth_preserves_constant_columns():
    data = np.tile(np.arange(12.0), (30, 1))
    out = vertical_smooth(make(data), 5)
    np.testing.assert_allclose(out.data, data)


def test_vertical_smooth_is_boxcar_in_interior():
    data = np.zeros((31, 3))
    data[15, :] = 1.0
    out = vertical_smooth(make(data), 2)  # half-width 2 -> 5-point boxcar
    np.testing.assert_allclose(out.data[13:18, 0], np.full(5, 0.2))
    assert out.data[:, 0].sum() == pytest.approx(1.0)


def test_normalize_unity():
    out = normalize_unity(make(np.full((4, 4), 3.0)))
    assert out.data.sum() == pytest.approx(1.0)
    with pytest.raises(NumericsError):
        normalize_unity(make(np.zeros((4, 4))))


# -- residual sum of squares -------------------------------------------------

def test_rss_basics():
    a = np.full((5, 5), 1.0 / 25.0)
    assert rss(a, a) == 0.0
    b = a.copy()
    b[0, 0] += 1e-3
    b[0, 1] -= 1e-3
    assert rss(a, b) == pytest.approx(2e-6)


def test_rss_requires_normalized_inputs():
    with pytest.raises(DataError):
        rss(np.ones((4, 4)), np.full((4, 4), 1.0 / 16.0))


def test_rss_dim_mismatch():
    with pytest.raises(DataError):
        rss(np.full((4, 4), 1 / 16.0), np.full((4, 5), 1 / 20.0))


def test_rss_mask_excludes_pixels():
    a = np.full((4, 4), 1.0 / 16.0)
    b = a.copy()
    b[0, 0] += 1e-2
    b[1, 1] -= 1e-2
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    mask[1, 1] = False
    assert rss(a, b, mask=mask) == pytest.approx(0.0, abs=1e-15)


# -- file round trips --------------------------------------------------------

def test_pgm16_round_trip(tmp_path, rng):
    data = rng.uniform(0.0, 1.0, (12, 17))
    path = tmp_path / "img.pgm"
    imgio.write_pgm16(path, data)
    back = imgio.read_pgm16(path)
    assert back.shape == data.shape
    assert np.abs(back - data).max() < data.max() / 65535.0 + 1e-12


def test_csv_round_trip_is_lossless(tmp_path, rng):
    data = rng.uniform(0.0, 1e-6, (9, 7))
    path = tmp_path / "img.csv"
    imgio.write_image_csv(path, data)
    back = imgio.read_image_csv(path)
    np.testing.assert_array_equal(back, data)


def test_read_image_sniffs_format(tmp_path, rng):
    data = rng.uniform(0.0, 1.0, (6, 6))
    p1 = tmp_path / "a.pgm"
    p2 = tmp_path / "a.csv"
    imgio.write_pgm16(p1, data)
    imgio.write_image_csv(p2, data)
    assert np.abs(imgio.read_image(p1) - data).max() < 1e-4
    np.testing.assert_array_equal(imgio.read_image(p2), data)


def test_read_mask(tmp_path):
    mask = np.ones((5, 5))
    mask[2, 2] = 0.0
    path = tmp_path / "mask.pgm"
    imgio.write_pgm16(path, mask)
    back = imgio.read_mask(path)
    assert back.dtype == bool
    assert not back[2, 2]
    assert back.sum() == 24
