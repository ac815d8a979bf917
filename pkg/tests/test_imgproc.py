import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from glimpse_iqa.imgproc import (extract_glimpse, extract_glimpse_batch, loc_to_pixel,
                                 local_contrast_normalize, pixel_to_loc, preprocess, to_grayscale)


def test_grayscale_white_black_red():
    assert np.all(to_grayscale(np.full((2, 2, 3), 255, np.uint8)) == 1.0)
    assert np.all(to_grayscale(np.zeros((2, 2, 3), np.uint8)) == 0.0)
    red = np.zeros((1, 1, 3), np.uint8)
    red[..., 0] = 255
    assert abs(to_grayscale(red)[0, 0] - 0.299) < 1e-6


def test_grayscale_rejects_empty():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((0, 0, 3), np.uint8))


def test_lcn_constant_image_is_zero():
    assert np.all(local_contrast_normalize(np.full((12, 9), 0.37)) == 0.0)


def test_lcn_bright_pixel_matches_loop_oracle():
    img = np.zeros((11, 11))
    img[5, 5] = 1.0
    out = local_contrast_normalize(img, 7, 1e-4)
    assert out[5, 5] > 0
    np.testing.assert_allclose(out, oracles.lcn(img, 7, 1e-4), rtol=0, atol=1e-10)


def test_lcn_matches_loop_oracle_on_random_images(rng):
    for _ in range(100):
        h, w = rng.integers(3, 14, size=2)
        window = int(rng.choice([3, 5, 7]))
        img = rng.random((h, w))
        np.testing.assert_allclose(local_contrast_normalize(img, window, 1e-4),
                                   oracles.lcn(img, window, 1e-4), rtol=0, atol=1e-10)


def test_lcn_window_mean_property(rng):
    # numerator (x - local mean) averages to zero over each full interior window
    img = rng.random((15, 15))
    r = 3
    for i in range(r, 15 - r):
        for j in range(r, 15 - r):
            win = img[i - r:i + r + 1, j - r:j + r + 1]
            assert abs((win - win.mean()).mean()) < 1e-9


def test_lcn_even_window_rejected():
    with pytest.raises(ValueError):
        local_contrast_normalize(np.zeros((5, 5)), 4)


def test_preprocess_from_uint8_rgb(rng):
    rgb = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    np.testing.assert_allclose(preprocess(rgb), local_contrast_normalize(to_grayscale(rgb)), atol=0)


def test_loc_to_pixel_examples():
    assert loc_to_pixel((0.0, 0.0), 101, 101) == (50.0, 50.0)
    assert loc_to_pixel((-1.0, -1.0), 101, 101) == (0.0, 0.0)
    assert loc_to_pixel((1.0, -1.0), 50, 80) == (0.0, 79.0)


def test_loc_pixel_round_trip(rng):
    for _ in range(100):
        h, w = rng.integers(2, 500, size=2)
        row, col = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        r2, c2 = loc_to_pixel(pixel_to_loc(row, col, h, w), h, w)
        assert abs(r2 - row) < 1e-9 and abs(c2 - col) < 1e-9


def test_loc_to_pixel_clamps():
    assert loc_to_pixel((3.0, -7.0), 11, 11) == (0.0, 10.0)


def test_glimpse_uniform_image():
    g = extract_glimpse(np.full((50, 70), 0.3), (0.7, -0.2), (8, 16, 32), 8)
    assert g.patches.shape == (3, 8, 8) and np.all(g.patches == 0.3)


def test_glimpse_full_frame_channel(rng):
    img = rng.random((288, 288))
    g = extract_glimpse(img, (0.0, 0.0))
    np.testing.assert_allclose(g.patches[2], img.reshape(32, 9, 32, 9).mean(axis=(1, 3)), atol=1e-15)
    assert g.scales == (32, 96, 288)


def test_glimpse_matches_crop_oracle(rng):
    img = rng.random((320, 320))
    for _ in range(20):
        loc = rng.uniform(-1, 1, 2)
        np.testing.assert_allclose(extract_glimpse(img, loc).patches,
                                   oracles.glimpse(img, loc, (32, 96, 288), 32), rtol=0, atol=1e-12)


def test_glimpse_integer_image_exact(rng):
    img = rng.integers(0, 256, (120, 90)).astype(float)
    for _ in range(100):
        loc = rng.uniform(-1, 1, 2)
        assert np.array_equal(extract_glimpse(img, loc, (8, 16, 32), 8).patches,
                              oracles.glimpse(img, loc, (8, 16, 32), 8))


def test_glimpse_first_scale_is_a_copy(rng):
    img = rng.random((64, 64))
    g = extract_glimpse(img, (0.0, 0.0), (16, 32, 64), 16)
    r = int(np.floor(31.5 + 0.5))
    np.testing.assert_array_equal(g.patches[0], img[r - 8:r + 8, r - 8:r + 8])


def test_glimpse_translation_consistency(rng):
    big = rng.random((200, 200))
    a, b = big[:160, :160], big[20:180, 30:190]
    row, col = 90.0, 100.0
    ga = extract_glimpse(a, pixel_to_loc(row, col, 160, 160), (8, 16, 32), 8).patches
    gb = extract_glimpse(b, pixel_to_loc(row - 20, col - 30, 160, 160), (8, 16, 32), 8).patches
    np.testing.assert_array_equal(ga, gb)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 2**31 - 1))
def test_glimpse_values_within_image_range(lx, ly, seed):
    img = np.random.default_rng(seed).standard_normal((40, 50))
    p = extract_glimpse(img, (lx, ly), (8, 16, 32), 8).patches
    assert p.min() >= img.min() - 1e-12 and p.max() <= img.max() + 1e-12


def test_glimpse_batch_equals_single(rng):
    imgs = rng.random((3, 48, 48))
    locs = rng.uniform(-1, 1, (3, 2))
    batch = extract_glimpse_batch(imgs, locs, (8, 16, 32), 8)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], extract_glimpse(imgs[i], locs[i], (8, 16, 32), 8).patches)


def test_glimpse_scale_validation():
    with pytest.raises(ValueError):
        extract_glimpse(np.zeros((40, 40)), (0, 0), (16, 8, 32), 8)
    with pytest.raises(ValueError):
        extract_glimpse(np.zeros((40, 40)), (0, 0), (8, 12, 32), 8)
