import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from synth2real import autodiff as ad
from synth2real import imageops as I


def brute_force_sq_edt(mask):
    ys, xs = np.nonzero(mask)
    gy, gx = np.mgrid[: mask.shape[0], : mask.shape[1]]
    return ((gy[..., None] - ys) ** 2 + (gx[..., None] - xs) ** 2).min(axis=-1).astype(float)


def _pair(seed=11):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 20, 3))
    return a, np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)


# --- distance transform and falloff ---------------------------------------------------

@pytest.mark.parametrize("density", [0.02, 0.2, 0.6])
def test_edt_equals_brute_force(density):
    rng = np.random.default_rng(int(density * 100))
    for _ in range(5):
        mask = rng.uniform(size=(17, 23)) < density
        mask[rng.integers(17), rng.integers(23)] = True
        np.testing.assert_array_equal(I.squared_distance_transform(mask), brute_force_sq_edt(mask))


def test_edt_single_pixel_is_radial():
    mask = np.zeros((9, 9), bool)
    mask[4, 4] = True
    gy, gx = np.mgrid[:9, :9]
    np.testing.assert_array_equal(I.euclidean_distance_transform(mask), np.hypot(gy - 4, gx - 4))


def test_edt_empty_mask_raises():
    with pytest.raises(ValueError):
        I.squared_distance_transform(np.zeros((4, 4)))


def test_falloff_spot_values():
    mask = np.zeros((1, 41), bool)
    mask[0, :10] = True
    a = I.build_falloff_mask(mask, radius=8.0)
    assert a[0, 9] == 1.0             # inside / boundary
    assert a[0, 13] == 0.5 ** 10      # d = R/2
    assert a[0, 17] == 0.0            # d = R
    assert a[0, 30] == 0.0            # d > R


@settings(max_examples=25, deadline=None)
@given(arrays(bool, (12, 12)), st.floats(1.0, 10.0))
def test_falloff_is_monotone_in_distance(mask, radius):
    if not mask.any():
        return
    a = I.build_falloff_mask(mask, radius)
    d = I.euclidean_distance_transform(mask)
    order = np.argsort(d, axis=None, kind="stable")
    assert np.all(np.diff(a.ravel()[order]) <= 1e-15)
    assert np.all(a[mask] == 1.0)


# --- colour ---------------------------------------------------------------------------

def test_yuv_round_trip():
    img = np.random.default_rng(0).uniform(size=(5, 6, 3))
    np.testing.assert_allclose(I.from_yuv(I.to_yuv(img)), img, atol=1e-12)


def test_grey_has_zero_chroma_and_unit_luma():
    grey = np.full((3, 3, 3), 0.4)
    np.testing.assert_allclose(I.chroma(grey), 0.0, atol=1e-15)
    np.testing.assert_allclose(I.luminance(grey), 0.4, atol=1e-15)


# --- resampling -----------------------------------------------------------------------

def test_area_matrix_rows_are_averages():
    m = I.area_matrix(8, 4)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m[0], [0.5, 0.5, 0, 0, 0, 0, 0, 0])


def test_gaussian_resample_preserves_constants():
    img = np.full((64, 64, 3), 0.3)
    np.testing.assert_allclose(I.gaussian_resample(img, (16, 16)), 0.3, atol=1e-12)


def test_gaussian_resample_is_differentiable_linear_map():
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    tape = ad.Tape()
    x = tape.variable(img)
    out = I.gaussian_resample(x, (4, 4))
    assert out.shape == (4, 4, 3)
    g = tape.backward(ad.sum(out))[x]
    np.testing.assert_allclose(g.sum(), 4 * 4 * 3, rtol=1e-10)


def test_upsample_then_area_downsample_is_identity():
    img = np.random.default_rng(2).uniform(size=(5, 7, 3))
    up = I.upsample_nearest(img, 2)
    np.testing.assert_allclose(I.area_downsample(up, 2), img, atol=1e-15)


def test_resize_area_handles_both_directions():
    img = np.random.default_rng(3).uniform(size=(8, 8, 3))
    assert I.resize_area(img, (4, 4)).shape == (4, 4, 3)
    assert I.resize_area(img, (12, 6)).shape == (12, 6, 3)
    np.testing.assert_allclose(I.resize_area(img, (8, 8)), img)


# --- Laplacian pyramid ---------------------------------------------------------------

@pytest.mark.parametrize("shape", [(64, 64, 3), (37, 50, 3), (32, 32)])
def test_pyramid_reconstruction(shape):
    img = np.random.default_rng(4).uniform(size=shape)
    pyr = I.laplacian_pyramid(img, 5)
    rec = I.reconstruct_laplacian(pyr)
    assert np.abs(rec.reshape(img.shape) - img).max() < 1e-5


def test_composite_endpoints():
    rng = np.random.default_rng(5)
    fg, bg = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    np.testing.assert_allclose(I.laplacian_composite(fg, bg, np.ones((32, 32))), fg, atol=1e-10)
    np.testing.assert_allclose(I.laplacian_composite(fg, bg, np.zeros((32, 32))), bg, atol=1e-10)


def test_composite_of_identical_images_is_that_image():
    img = np.random.default_rng(6).uniform(size=(32, 32, 3))
    alpha = np.random.default_rng(7).uniform(size=(32, 32))
    np.testing.assert_allclose(I.laplacian_composite(img, img, alpha), img, atol=1e-10)


def test_composite_shape_mismatch():
    with pytest.raises(ValueError):
        I.laplacian_composite(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), np.zeros((8, 8)))


# --- SSIM -----------------------------------------------------------------------------

def test_ssim_identity():
    a, _ = _pair()
    assert abs(I.ssim(a, a) - 1.0) < 1e-9


def test_ssim_matches_reference_implementation():
    # frozen from scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
    # use_sample_covariance=False, data_range=1)
    a, b = _pair()
    assert I.ssim(a, b) == pytest.approx(0.9458521111962249, abs=1e-12)
    assert I.ssim(a[..., 0], b[..., 0]) == pytest.approx(0.9491627855253372, abs=1e-12)


def test_ssim_symmetric_and_bounded():
    a, b = _pair(3)
    assert I.ssim(a, b) == pytest.approx(I.ssim(b, a), abs=1e-14)
    assert -1.0 <= I.ssim(a, 1 - a) <= 1.0


def test_ssim_small_images_shrink_the_window():
    a, b = _pair()
    assert np.isfinite(I.ssim(a[:6, :6], b[:6, :6]))


def test_maskset_validates():
    with pytest.raises(ValueError):
        I.MaskSet(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        I.MaskSet(np.zeros((4, 4, 3)), np.full((4, 4), 1.5), np.zeros((4, 4)))


def test_edt_full_foreground_is_zero():
    np.testing.assert_array_equal(I.euclidean_distance_transform(np.ones((6, 7), bool)), 0.0)


def test_white_and_black_yuv():
    white = I.to_yuv(np.ones((1, 1, 3)))[0, 0]
    assert white[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(white[1:], 0.0, atol=1e-15)
    assert I.luminance(np.zeros((1, 1, 3))).item() == 0.0


def test_resample_footprint_sums_to_one():
    # the response of one output pixel to every input impulse is its footprint
    img = np.zeros((64, 64, 1))
    footprint = np.zeros((64, 64))
    for i in range(64):
        for j in range(0, 64, 7):
            img[i, j] = 1.0
            footprint[i, j] = I.gaussian_resample(img, (16, 16))[5, 9, 0]
            img[i, j] = 0.0
    rows, cols = I._resample_pair((64, 64), (16, 16), 7, None)
    np.testing.assert_allclose(footprint[:, ::7], np.outer(rows[5], cols[9])[:, ::7], atol=1e-15)
    assert np.outer(rows[5], cols[9]).sum() == pytest.approx(1.0, abs=1e-6)


def test_single_level_composite_is_plain_alpha_blend():
    rng = np.random.default_rng(8)
    fg, bg, a = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16))
    out = I.laplacian_composite(fg, bg, a, levels=1)
    np.testing.assert_array_equal(out, a[..., None] * fg + (1 - a[..., None]) * bg)


def test_ssim_binary_inverse_is_negative():
    img = (np.random.default_rng(9).uniform(size=(32, 32)) > 0.5).astype(float)
    assert I.ssim(img, 1.0 - img) < 0.0


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(10)
    img = rng.uniform(size=(32, 32, 3))
    noise = rng.standard_normal(img.shape)
    assert I.ssim(img, img + 0.01 * noise) > I.ssim(img, img + 0.1 * noise)
