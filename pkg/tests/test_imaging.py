"""Color conversion, bicubic resampling, and PNG I/O contracts."""

import numpy as np
import pytest

from treesr import imaging


class TestYCbCr:
    def test_white_luma_is_one(self):
        white = np.ones((2, 2, 3))
        y, _, _ = imaging.rgb_to_ycbcr(white)
        np.testing.assert_allclose(y, 1.0)

    def test_black_luma_is_zero(self):
        y, _, _ = imaging.rgb_to_ycbcr(np.zeros((2, 2, 3)))
        np.testing.assert_allclose(y, 0.0)

    def test_pure_red_luma(self):
        red = np.zeros((3, 4, 3))
        red[..., 0] = 1.0
        y, _, _ = imaging.rgb_to_ycbcr(red)
        np.testing.assert_allclose(y, 0.299, atol=1e-12)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            img = rng.random((9, 7, 3))
            back = imaging.ycbcr_to_rgb(*imaging.rgb_to_ycbcr(img))
            np.testing.assert_allclose(back, img, atol=1e-6)

    def test_gray_extract_y(self):
        for g in (0.0, 0.25, 1.0):
            img = np.full((4, 5, 3), g)
            np.testing.assert_allclose(imaging.extract_y(img), g, atol=1e-12)

    def test_extract_y_matches_first_plane(self):
        rng = np.random.default_rng(1)
        img = rng.random((6, 6, 3))
        y, _, _ = imaging.rgb_to_ycbcr(img)
        np.testing.assert_array_equal(imaging.extract_y(img), y)

    def test_monotone_under_uniform_brightening(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            img = rng.random((8, 8, 3))
            brightened = np.clip(img + rng.uniform(0.0, 0.5), 0.0, 1.0)
            assert np.all(imaging.extract_y(brightened) >= imaging.extract_y(img) - 1e-12)


# Frozen against the independent direct-convolution oracle below.
RAMP_4X4 = np.arange(16, dtype=np.float64).reshape(4, 4) / 15.0
RAMP_2X2_EXPECTED = np.array([
    [0.15364583333333334, 0.29218750000000004],
    [0.70781250000000001, 0.84635416666666663],
])


def _oracle_cubic(t):
    at = abs(t)
    if at <= 1:
        return 1.5 * at ** 3 - 2.5 * at ** 2 + 1
    if at < 2:
        return -0.5 * at ** 3 + 2.5 * at ** 2 - 4 * at + 2
    return 0.0


def _oracle_reflect(k, n):
    if n == 1:
        return 0
    m = k % (2 * n)
    return 2 * n - 1 - m if m >= n else m


def _oracle_resize_1d(vec, out_size):
    """Brute-force separable kernel evaluation, one tap at a time."""
    n = len(vec)
    ratio = out_size / n
    ks = min(ratio, 1.0)
    hs = 2.0 / ks
    out = []
    for i in range(out_size):
        x = (i + 0.5) / ratio - 0.5
        k = int(np.floor(x - hs)) + 1
        weights, values = [], []
        while k <= x + hs:
            weights.append(_oracle_cubic((x - k) * ks))
            values.append(vec[_oracle_reflect(k, n)])
            k += 1
        weights = np.array(weights)
        weights /= weights.sum()
        out.append(float(weights @ np.array(values)))
    return np.array(out)


def _oracle_resize_2d(plane, oh, ow):
    tmp = np.stack([_oracle_resize_1d(plane[:, j], oh) for j in range(plane.shape[1])], axis=1)
    return np.stack([_oracle_resize_1d(tmp[i, :], ow) for i in range(tmp.shape[0])], axis=0)


class TestBicubicResize:
    def test_constant_is_exact(self):
        img = np.full((13, 11, 3), 0.37)
        for oh, ow in [(5, 23), (13, 4), (26, 22), (1, 1)]:
            out = imaging.bicubic_resize(img, oh, ow)
            assert np.all(out == 0.37), (oh, ow)

    def test_identity_size_is_identical(self):
        rng = np.random.default_rng(3)
        img = rng.random((7, 9, 3))
        np.testing.assert_array_equal(imaging.bicubic_resize(img, 7, 9), img)

    def test_ramp_matches_frozen_oracle_values(self):
        img = np.repeat(RAMP_4X4[:, :, None], 3, axis=2)
        out = imaging.bicubic_resize(img, 2, 2)
        for c in range(3):
            np.testing.assert_allclose(out[:, :, c], RAMP_2X2_EXPECTED, atol=1e-12)

    def test_random_resizes_match_oracle(self):
        rng = np.random.default_rng(4)
        for oh, ow in [(3, 5), (11, 6), (4, 13)]:
            plane = rng.random((6, 8))
            mine = imaging.bicubic_resize(plane, oh, ow)
            oracle = np.clip(_oracle_resize_2d(plane, oh, ow), 0.0, 1.0)
            np.testing.assert_allclose(mine, oracle, atol=1e-12)

    def test_output_clamped(self):
        img = np.zeros((8, 8, 3))
        img[::2, ::2] = 1.0
        out = imaging.bicubic_resize(img, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_empty_output(self):
        with pytest.raises(ValueError):
            imaging.bicubic_resize(np.zeros((4, 4, 3)), 0, 4)


class TestPngIO:
    def test_8bit_roundtrip_values(self, tmp_path):
        img = np.full((5, 6, 3), 128 / 255.0)
        path = tmp_path / "gray.png"
        imaging.save_png(img, path)
        np.testing.assert_array_equal(imaging.load_png(path), img)

    def test_16bit_full_scale(self, tmp_path):
        img = np.ones((4, 4, 3))
        path = tmp_path / "white16.png"
        imaging.save_png(img, path, bit_depth=16)
        loaded = imaging.load_png(path)
        np.testing.assert_array_equal(loaded, 1.0)

    def test_save_load_save_idempotent(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.random((9, 7, 3))
        first = tmp_path / "a.png"
        second = tmp_path / "b.png"
        imaging.save_png(img, first)
        imaging.save_png(imaging.load_png(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_16bit_roundtrip_is_lossless_on_grid(self, tmp_path):
        rng = np.random.default_rng(6)
        codes = rng.integers(0, 65536, size=(8, 8, 3))
        img = codes / 65535.0
        path = tmp_path / "c.png"
        imaging.save_png(img, path, bit_depth=16)
        np.testing.assert_array_equal(imaging.load_png(path), img)

    def test_round_half_up(self, tmp_path):
        # 0.5/255 sits exactly on the rounding boundary -> code 1, not 0.
        img = np.full((2, 2, 3), 0.5 / 255.0)
        path = tmp_path / "half.png"
        imaging.save_png(img, path)
        np.testing.assert_array_equal(imaging.load_png(path), 1 / 255.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.png"):
            imaging.load_png(tmp_path / "nope.png")

    def test_malformed_png(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(imaging.ImageFormatError, match="bad.png"):
            imaging.load_png(path)

    def test_non_rgb_color_type_rejected(self, tmp_path):
        import cv2

        path = tmp_path / "gray.png"
        cv2.imwrite(str(path), np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(imaging.ImageFormatError, match="color type"):
            imaging.load_png(path)

    def test_save_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            imaging.save_png(np.full((2, 2, 3), 1.5), tmp_path / "x.png")
