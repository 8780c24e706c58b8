import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from flwnet import imaging


def _write_png(path, pixels):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


class TestLoadSave:
    def test_white_pixel(self, tmp_path):
        _write_png(tmp_path / "w.png", [[[255, 255, 255]]])
        np.testing.assert_array_equal(imaging.load_image(tmp_path / "w.png"), [[[1.0, 1.0, 1.0]]])

    def test_black_pixel(self, tmp_path):
        _write_png(tmp_path / "b.png", [[[0, 0, 0]]])
        np.testing.assert_array_equal(imaging.load_image(tmp_path / "b.png"), [[[0.0, 0.0, 0.0]]])

    def test_exact_byte_scaling(self, tmp_path):
        px = np.zeros((2, 2, 3), np.uint8)
        px[0, 0] = (128, 64, 32)
        _write_png(tmp_path / "c.png", px)
        img = imaging.load_image(tmp_path / "c.png")
        assert img.shape == (2, 2, 3)
        np.testing.assert_array_equal(img[0, 0], [128 / 255, 64 / 255, 32 / 255])

    def test_roundtrip_is_identity_on_byte_exact_images(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(7, 5, 3)) / 255.0
        imaging.save_image(img, tmp_path / "r.png")
        np.testing.assert_array_equal(imaging.load_image(tmp_path / "r.png"), img)

    @pytest.mark.parametrize("value, byte", [(0.5, 128), (1.0, 255), (0.0, 0), (0.5 / 255, 1)])
    def test_round_half_up(self, value, byte):
        assert imaging.to_bytes(np.full((1, 1, 3), value))[0, 0, 0] == byte

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            imaging.load_image(tmp_path / "nope.png")

    def test_undecodable_file(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(imaging.ImageError):
            imaging.load_image(tmp_path / "bad.png")

    def test_sixteen_bit_rejected(self, tmp_path):
        Image.fromarray(np.full((2, 2), 300, np.uint16)).save(tmp_path / "d.png")
        with pytest.raises(imaging.ImageError, match="bit depth"):
            imaging.load_image(tmp_path / "d.png")

    def test_grayscale_expands_to_rgb(self, tmp_path):
        Image.fromarray(np.full((2, 3), 51, np.uint8)).save(tmp_path / "g.png")
        img = imaging.load_image(tmp_path / "g.png")
        assert img.shape == (2, 3, 3)
        np.testing.assert_array_equal(img, 0.2)


class TestValidate:
    @pytest.mark.parametrize(
        "arr",
        [np.zeros((2, 2)), np.zeros((0, 2, 3)), np.full((1, 1, 3), 1.5), np.full((1, 1, 3), np.nan)],
    )
    def test_rejects(self, arr):
        with pytest.raises(imaging.ImageError):
            imaging.validate_image(arr)


class TestVChannel:
    def test_max_of_components(self):
        assert imaging.v_channel(np.array([[[0.2, 0.5, 0.3]]]))[0, 0] == 0.5

    def test_gray(self):
        np.testing.assert_array_equal(imaging.v_channel(np.full((3, 4, 3), 0.4)), 0.4)

    def test_black(self):
        assert imaging.v_channel(np.zeros((1, 1, 3)))[0, 0] == 0.0


class TestHistogram:
    def test_constant_zero(self):
        h = imaging.histogram(np.zeros((4, 4)), 32)
        assert h[0] == 1.0 and h[1:].sum() == 0.0

    def test_bin_centres_uniform(self):
        centres = np.arange(32) / 32 + 1 / 64
        plane = np.tile(centres, (3, 1))
        np.testing.assert_array_equal(imaging.histogram(plane, 32), np.full(32, 1 / 32))

    def test_one_goes_to_last_bin(self):
        h = imaging.histogram(np.ones((2, 2)), 32)
        assert h[31] == 1.0 and h[:31].sum() == 0.0

    def test_left_edges_are_closed(self):
        edges = np.arange(32) / 32
        np.testing.assert_array_equal(imaging.histogram(edges, 32), np.full(32, 1 / 32))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 2**32 - 1))
    def test_sums_to_one(self, bins, seed):
        plane = np.random.default_rng(seed).random((9, 7))
        assert abs(imaging.histogram(plane, bins).sum() - 1.0) < 1e-12


class TestMeanV:
    def test_gray(self):
        assert imaging.mean_v(np.full((2, 2, 3), 0.4)) == pytest.approx(0.4, abs=1e-15)

    def test_half_black_half_white(self):
        img = np.zeros((2, 2, 3))
        img[0] = 1.0
        assert imaging.mean_v(img) == 0.5

    def test_single_pixel(self):
        assert imaging.mean_v(np.array([[[0.1, 0.2, 0.3]]])) == 0.3


class TestLab:
    def test_white(self):
        L, a, b = imaging.srgb_to_lab(np.ones((1, 1, 3)))[0, 0]
        assert L == pytest.approx(100.0, abs=1e-3)
        assert abs(a) < 0.01 and abs(b) < 0.01

    def test_black(self):
        np.testing.assert_allclose(imaging.srgb_to_lab(np.zeros((1, 1, 3)))[0, 0], 0.0, atol=1e-12)

    def test_mid_gray_by_hand(self):
        # sRGB 0.5 -> linear ((0.5 + 0.055) / 1.055) ** 2.4; neutral so Y/Yn equals it
        y = ((0.5 + 0.055) / 1.055) ** 2.4
        L_expected = 116 * y ** (1 / 3) - 16
        L, a, b = imaging.srgb_to_lab(np.full((1, 1, 3), 0.5))[0, 0]
        assert L == pytest.approx(L_expected, abs=1e-3)
        assert L == pytest.approx(53.389, abs=1e-3)
        assert abs(a) < 0.01 and abs(b) < 0.01

    def test_matches_skimage(self, rng):
        color = pytest.importorskip("skimage.color")
        img = rng.random((6, 5, 3))
        # skimage uses a different D65 white point rounding: ~3e-4 relative apart
        np.testing.assert_allclose(imaging.srgb_to_lab(img), color.rgb2lab(img), rtol=1e-3, atol=1e-2)


class TestPairs:
    def test_mu_ref(self, small_pair):
        assert abs(small_pair.mu_ref - imaging.v_channel(small_pair.high).mean()) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(imaging.ImageError):
            imaging.make_pair(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestSamplePatch:
    def test_full_size_no_flips_is_identity(self, small_pair, rng):
        size = min(small_pair.low.shape[:2])
        sq = imaging.make_pair(small_pair.low[:size, :size], small_pair.high[:size, :size])
        out = imaging.sample_patch(sq, size, rng, flips=False)
        np.testing.assert_array_equal(out.low, sq.low)
        np.testing.assert_array_equal(out.high, sq.high)

    def test_seeded_determinism(self, small_pair):
        a = imaging.sample_patch(small_pair, 8, np.random.default_rng(5))
        b = imaging.sample_patch(small_pair, 8, np.random.default_rng(5))
        np.testing.assert_array_equal(a.low, b.low)
        np.testing.assert_array_equal(a.high, b.high)

    def test_windows_are_aligned(self, rng):
        # marker image: every pixel encodes its own coordinates
        h, w = 20, 30
        yy, xx = np.mgrid[0:h, 0:w]
        high = np.stack([yy / h, xx / w, np.zeros_like(yy, dtype=float)], -1)
        pair = imaging.make_pair(high * 0.5, high)
        for _ in range(20):
            crop = imaging.sample_patch(pair, 7, rng)
            np.testing.assert_array_equal(crop.low, crop.high * 0.5)

    def test_mu_recomputed_on_crop(self, small_pair, rng):
        crop = imaging.sample_patch(small_pair, 10, rng)
        assert crop.mu_ref == pytest.approx(imaging.mean_v(crop.high), abs=1e-12)

    def test_too_large(self, small_pair, rng):
        with pytest.raises(ValueError):
            imaging.sample_patch(small_pair, 100, rng)

    def test_flip_semantics(self):
        arr = np.arange(16).reshape(4, 4)
        win = imaging.PatchWindow(0, 0, 4, flip_h=True, flip_v=True)
        np.testing.assert_array_equal(win.apply(arr), arr[::-1, ::-1])


class TestManifest:
    def test_pairs_by_name(self, pair_dirs):
        m = imaging.DatasetManifest.from_dirs(*pair_dirs)
        assert len(m) == 3
        assert [p.name for p, _ in m.entries] == ["img0.png", "img1.png", "img2.png"]
        pair = m.load(1)
        assert pair.name == "img1.png" and pair.low.shape == (24, 20, 3)

    def test_unmatched_files_skipped(self, pair_dirs):
        low, _ = pair_dirs
        imaging.save_image(np.zeros((2, 2, 3)), low / "orphan.png")
        assert len(imaging.DatasetManifest.from_dirs(*pair_dirs)) == 3

    def test_size_mismatch(self, pair_dirs):
        low, high = pair_dirs
        imaging.save_image(np.zeros((3, 3, 3)), low / "img0.png")
        with pytest.raises(imaging.ImageError, match="size mismatch"):
            imaging.DatasetManifest.from_dirs(low, high)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope"):
            imaging.DatasetManifest.from_dirs(tmp_path / "nope", tmp_path)
