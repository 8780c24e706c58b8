import numpy as np
import pytest

pytest.importorskip("skimage")

from flwnet import imaging, synthetic  # noqa: E402


class TestSynthetic:
    def test_pairs_are_valid_and_deterministic(self):
        a = synthetic.make_pairs(3, (40, 60), seed=5)
        b = synthetic.make_pairs(3, (40, 60), seed=5)
        assert [p.name for p in a] == ["pair_000.png", "pair_001.png", "pair_002.png"]
        for p, q in zip(a, b):
            assert p.low.shape == (40, 60, 3)
            np.testing.assert_array_equal(p.low, q.low)
            np.testing.assert_array_equal(p.high, q.high)

    def test_low_is_darker_and_byte_exact(self):
        for p in synthetic.make_pairs(4, (32, 48), seed=1):
            assert imaging.mean_v(p.low) < 0.5 * imaging.mean_v(p.high)
            np.testing.assert_array_equal(np.round(p.low * 255) / 255, p.low)

    def test_write_pairs(self, tmp_path):
        pairs = synthetic.make_pairs(2, (16, 24), seed=0)
        low, high = synthetic.write_pairs(pairs, tmp_path)
        manifest = imaging.DatasetManifest.from_dirs(low, high)
        assert len(manifest) == 2
        np.testing.assert_array_equal(manifest.load(1).high, pairs[1].high)

    def test_linear_srgb_inverse(self, rng):
        x = rng.random(100)
        np.testing.assert_allclose(synthetic.linear_to_srgb(imaging.srgb_to_linear(x)), x, atol=1e-12)
