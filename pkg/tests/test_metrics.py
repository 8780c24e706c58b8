import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flwnet import imaging, metrics
from flwnet.losses import ssim_loss

from sharma_pairs import SHARMA_PAIRS


class TestPsnr:
    def test_mse_one_hundredth(self):
        ref = np.zeros((4, 4, 3))
        out = np.full((4, 4, 3), 0.1)
        assert metrics.psnr(out, ref) == pytest.approx(20.0, abs=1e-12)

    def test_half_elements_off_by_one(self):
        ref = np.zeros((2, 2, 3))
        out = ref.copy()
        out[0] = 1.0
        assert metrics.psnr(out, ref) == pytest.approx(10 * math.log10(2), abs=1e-12)
        assert metrics.psnr(out, ref) == pytest.approx(3.0103, abs=1e-4)

    def test_identical_is_infinite(self, rng):
        img = rng.random((3, 3, 3))
        assert metrics.psnr(img, img) == metrics.INF_PSNR == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestSsimMetric:
    def test_identical(self, rng):
        img = rng.random((16, 16, 3))
        assert metrics.ssim_metric(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_complements_loss(self, rng):
        for _ in range(5):
            a, b = rng.random((16, 14, 3)), rng.random((16, 14, 3))
            assert abs(metrics.ssim_metric(a, b) + float(ssim_loss(a, b)) - 1.0) < 1e-9

    def test_against_skimage(self, rng):
        skm = pytest.importorskip("skimage.metrics")
        a = rng.random((20, 24, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        theirs = skm.structural_similarity(
            a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False,
        )
        assert abs(metrics.ssim_metric(a, b) - theirs) < 1e-6


class TestCiede2000:
    @pytest.mark.parametrize("row", SHARMA_PAIRS, ids=[f"pair{i + 1}" for i in range(len(SHARMA_PAIRS))])
    def test_published_pairs(self, row):
        lab1, lab2, expected = np.array(row[:3]), np.array(row[3:6]), row[6]
        assert abs(float(metrics.delta_e2000(lab1, lab2)) - expected) < 1e-4

    def test_table_size(self):
        assert len(SHARMA_PAIRS) == 34

    def test_vectorised_matches_rows(self):
        table = np.array(SHARMA_PAIRS)
        np.testing.assert_allclose(metrics.delta_e2000(table[:, :3], table[:, 3:6]), table[:, 6], atol=1e-4)

    def test_against_skimage(self, rng):
        color = pytest.importorskip("skimage.color")
        lab1 = np.stack([rng.uniform(0, 100, 200), rng.uniform(-80, 80, 200), rng.uniform(-80, 80, 200)], -1)
        lab2 = np.stack([rng.uniform(0, 100, 200), rng.uniform(-80, 80, 200), rng.uniform(-80, 80, 200)], -1)
        np.testing.assert_allclose(metrics.delta_e2000(lab1, lab2), color.deltaE_ciede2000(lab1, lab2), atol=1e-8)

    def test_identical_images(self, rng):
        img = rng.random((5, 5, 3))
        assert metrics.ciede2000(img, img) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        la, lb = imaging.srgb_to_lab(a), imaging.srgb_to_lab(b)
        np.testing.assert_allclose(metrics.delta_e2000(la, lb), metrics.delta_e2000(lb, la), atol=1e-9, rtol=0)

    def test_achromatic_pair(self):
        assert float(metrics.delta_e2000(np.array([50.0, 0, 0]), np.array([50.0, 0, 0]))) == 0.0
        assert float(metrics.delta_e2000(np.array([40.0, 0, 0]), np.array([60.0, 0, 0]))) > 0


class TestReport:
    def _report(self):
        return metrics.EvalReport(
            [
                metrics.ImageScores("b.png", 20.0, 0.8, 5.0),
                metrics.ImageScores("a.png", 30.0, 0.9, 3.0),
                metrics.ImageScores("c.png", math.inf, 1.0, 0.0),
            ],
            {"d.png": "cannot decode"},
            "fixed:0.4",
        )

    def test_sorted_by_name(self):
        assert [s.name for s in self._report().images] == ["a.png", "b.png", "c.png"]

    def test_means_exclude_infinite_psnr(self):
        with pytest.warns(RuntimeWarning, match="infinite"):
            m = self._report().means()
        assert m["psnr"] == 25.0
        assert abs(m["ssim"] - np.mean([0.8, 0.9, 1.0])) < 1e-9
        assert abs(m["de2000"] - np.mean([5.0, 3.0, 0.0])) < 1e-9

    def test_json(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = json.loads(self._report().to_json())
        assert data["images"][2]["psnr"] == "inf"
        assert data["errors"] == {"d.png": "cannot decode"}
        assert data["mu_mode"] == "fixed:0.4"

    def test_table(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            text = self._report().to_table()
        lines = text.splitlines()
        assert lines[0].split() == ["image", "PSNR", "SSIM", "dE00"]
        assert "inf" in lines[4] and lines[5].startswith("mean")
        assert "cannot decode" in lines[-1]

    @pytest.mark.parametrize("text, mu", [("ref", None), ("fixed:0.4", 0.4), ("FIXED:1", 1.0)])
    def test_parse_mu_mode(self, text, mu):
        assert metrics.parse_mu_mode(text) == mu

    @pytest.mark.parametrize("text", ["fixed:0", "fixed:1.5", "auto", "fixed:x"])
    def test_parse_mu_mode_rejects(self, text):
        with pytest.raises(ValueError):
            metrics.parse_mu_mode(text)


class TestEvaluateDataset:
    def test_perfect_model(self, pair_dirs):
        manifest = imaging.DatasetManifest.from_dirs(*pair_dirs)
        lookup = {i: manifest.load(i) for i in range(len(manifest))}
        highs = {p.name: p.high for p in lookup.values()}
        lows = {p.name: p.low.tobytes() for p in lookup.values()}

        def oracle(img, mu):
            name = next(n for n, b in lows.items() if b == img.tobytes())
            return highs[name]

        with pytest.warns(RuntimeWarning):
            report = metrics.evaluate_dataset(oracle, manifest, mu=0.4)
            m = report.means()
        assert all(s.psnr == math.inf and s.de2000 == 0.0 for s in report.images)
        assert abs(m["ssim"] - 1.0) < 1e-12

    def test_mu_from_reference(self, pair_dirs):
        manifest = imaging.DatasetManifest.from_dirs(*pair_dirs)
        seen = []

        def spy(img, mu):
            seen.append(mu)
            return img

        report = metrics.evaluate_dataset(spy, manifest, mu=None)
        expected = [imaging.mean_v(manifest.load(i).high) for i in range(len(manifest))]
        assert seen == expected
        assert report.mu_mode == "from_reference"

    def test_fixed_mu(self, pair_dirs):
        seen = []
        metrics.evaluate_dataset(lambda img, mu: seen.append(mu) or img, imaging.DatasetManifest.from_dirs(*pair_dirs), 0.4)
        assert seen == [0.4, 0.4, 0.4]

    def test_accepts_checkpoint(self, pair_dirs):
        from flwnet.checkpoint import ModelCheckpoint

        report = metrics.evaluate_dataset(ModelCheckpoint.fresh(), imaging.DatasetManifest.from_dirs(*pair_dirs))
        assert len(report.images) == 3

    def test_decode_error_recorded(self, pair_dirs):
        low, high = pair_dirs
        (low / "broken.png").write_bytes(b"junk")
        (high / "broken.png").write_bytes(b"junk")
        manifest = imaging.DatasetManifest.from_dirs(low, high, check=False)
        report = metrics.evaluate_dataset(lambda img, mu: img, manifest)
        assert len(report.images) == 3 and "broken.png" in report.errors

    def test_empty(self, tmp_path):
        (tmp_path / "l").mkdir()
        (tmp_path / "h").mkdir()
        with pytest.raises(ValueError):
            metrics.evaluate_dataset(lambda img, mu: img, imaging.DatasetManifest.from_dirs(tmp_path / "l", tmp_path / "h"))

    def test_mean_is_arithmetic_mean(self, pair_dirs):
        report = metrics.evaluate_dataset(lambda img, mu: np.clip(img * 3, 0, 1), imaging.DatasetManifest.from_dirs(*pair_dirs))
        m = report.means()
        assert abs(m["psnr"] - np.mean([s.psnr for s in report.images])) < 1e-9
