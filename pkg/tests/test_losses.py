import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flwnet import losses as L
from flwnet import reference as R
from flwnet import verify
from flwnet.losses import RelLossConfig


def _batch(rng, n=1, h=12, w=14, lo=0.1, hi=0.9):
    return torch.as_tensor(lo + (hi - lo) * rng.random((n, 3, h, w)))


@pytest.fixture
def pair(rng):
    return _batch(rng, 2), _batch(rng, 2)


class TestL1:
    def test_identical(self, pair):
        assert L.l1_loss(pair[0], pair[0]).item() == 0.0

    def test_constants(self):
        assert L.l1_loss(np.zeros((3, 3, 3)), np.full((3, 3, 3), 0.5)).item() == 0.5

    def test_symmetric(self, pair):
        assert L.l1_loss(*pair).item() == L.l1_loss(pair[1], pair[0]).item()

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            L.l1_loss(_batch(rng, h=5), _batch(rng, h=6))


class TestSsim:
    def test_identical(self, pair):
        assert abs(L.ssim_loss(pair[0], pair[0]).item()) < 1e-12

    def test_offset_against_skimage(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        ref = 0.1 + 0.7 * rng.random((24, 20, 3))
        out = ref + 0.1
        ours = 1 - L.ssim_loss(out, ref).item()
        theirs = metrics.structural_similarity(
            out, ref, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False,
        )
        assert abs(ours - theirs) < 1e-6

    def test_against_extended_precision(self, pair):
        out, ref = pair
        ours = L.ssim_loss(out, ref).item()
        assert abs(ours - float(R.ssim_loss(R.as_ld(out), R.as_ld(ref)))) < 1e-12

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            L.ssim_loss(_batch(rng, h=8, w=8), _batch(rng, h=8, w=8))

    def test_gradcheck_fp32(self):
        assert verify.run_item("loss.ssim", 32, trials=2).worst < 1e-3


class TestColor:
    def test_identical(self, pair):
        assert abs(L.color_loss(pair[0], pair[0]).item()) < 1e-5

    def test_half_scale(self, pair):
        assert abs(L.color_loss(0.5 * pair[1], pair[1]).item()) < 1e-5

    def test_orthogonal_pixel(self):
        out = np.array([[[1.0, 0.0, 0.0]]])
        ref = np.array([[[0.0, 1.0, 0.0]]])
        assert L.color_loss(out, ref).item() == 1.0

    def test_black_pixels_match(self):
        assert L.color_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 3))).item() == 0.0


class TestBrightness:
    def test_identical(self, pair):
        assert abs(L.brightness_loss(*[pair[1]] * 2).item()) < 1e-5

    def test_affine_model(self, pair):
        ref = pair[1]
        assert abs(L.brightness_loss(0.5 * ref + 0.2, ref).item()) < 1e-4

    def test_flat_images_use_degenerate_convention(self):
        out = np.full((8, 8, 3), 0.3)
        ref = np.full((8, 8, 3), 0.7)
        assert L.brightness_loss(out, ref).item() == 0.0

    def test_block_larger_than_image(self, rng):
        with pytest.raises(ValueError):
            L.brightness_loss(_batch(rng, h=2, w=8), _batch(rng, h=2, w=8))


class TestStructure:
    def test_gradient_maps(self):
        x = torch.arange(12, dtype=torch.float64).reshape(1, 1, 3, 4)
        g = L.image_gradients(x)
        assert g.shape == (1, 2, 3, 4)
        assert g[0, 0, :, :3].eq(1).all() and g[0, 0, :, 3].eq(0).all()
        assert g[0, 1, :2].eq(4).all() and g[0, 1, 2].eq(0).all()

    def test_identical(self, pair):
        assert abs(L.structure_loss(pair[1], pair[1]).item()) < 1e-5

    def test_affine_model(self, pair):
        ref = pair[1]
        assert abs(L.structure_loss(0.5 * ref + 0.2, ref).item()) < 1e-4

    def test_gradcheck_8x8_fp32(self, rng):
        from flwnet.diffcore import gradcheck

        out = rng.random((1, 3, 8, 8)).astype(np.float32)  # generic point: no tied block minima
        ref = torch.as_tensor(rng.random((1, 3, 8, 8)))
        err = gradcheck(
            lambda ps: L.structure_loss(ps["out"], ref),
            {"out": torch.as_tensor(out, dtype=torch.float32)},
            oracle=lambda ps: R.structure_loss(ps["out"], R.as_ld(ref)),
        )
        assert err < 1e-3


class TestKernelMatchesReference:
    """The fused block-cosine kernel against the explicit unfold/min/cosine path."""

    @pytest.mark.parametrize("stride", [1, 2, 3, 5])
    @pytest.mark.parametrize("fn", [L.brightness_loss, L.structure_loss])
    def test_value_and_gradient(self, rng, fn, stride):
        cfg = RelLossConfig(block_stride=stride)
        ref = _batch(rng, 2, 13, 11)
        out = _batch(rng, 2, 13, 11).requires_grad_(True)
        a = fn(out, ref, cfg, impl="kernel")
        (ga,) = torch.autograd.grad(a, out)
        b = fn(out, ref, cfg, impl="reference")
        (gb,) = torch.autograd.grad(b, out)
        assert abs(a.item() - b.item()) < 1e-12
        torch.testing.assert_close(ga, gb, atol=1e-12, rtol=1e-9)

    def test_ties_in_quantised_images(self, rng):
        # 8-bit levels and flat patches create equal minima inside blocks
        ref = torch.as_tensor(np.round(rng.random((1, 3, 10, 10)) * 4) / 4)
        out = torch.as_tensor(np.round(rng.random((1, 3, 10, 10)) * 4) / 4).requires_grad_(True)
        for fn in (L.brightness_loss, L.structure_loss):
            (ga,) = torch.autograd.grad(fn(out, ref, impl="kernel"), out)
            (gb,) = torch.autograd.grad(fn(out, ref, impl="reference"), out)
            torch.testing.assert_close(ga, gb, atol=1e-12, rtol=1e-9)

    def test_reference_gets_no_gradient(self, rng):
        ref = _batch(rng).requires_grad_(True)
        out = _batch(rng).requires_grad_(True)
        L.brightness_loss(out, ref).backward()
        (gb,) = torch.autograd.grad(L.brightness_loss(out, ref, impl="reference"), ref)
        torch.testing.assert_close(ref.grad, gb, atol=1e-12, rtol=1e-9)

    def test_float32_input(self, rng):
        out, ref = _batch(rng).float(), _batch(rng).float()
        v = L.brightness_loss(out, ref)
        assert v.dtype == torch.float32
        assert abs(v.item() - L.brightness_loss(out.double(), ref.double()).item()) < 1e-6

    def test_unknown_impl(self, pair):
        with pytest.raises(ValueError):
            L.brightness_loss(*pair, impl="fast")


class TestInvariance:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.25, 0.5, 2.0]))
    def test_color_scale(self, seed, lam):
        # the eps in the denominator leaves ~eps / (|u| |v|) per pixel, so avoid near-black pixels
        rng = np.random.default_rng(seed)
        ref = _batch(rng, 1, 9, 9, 0.3, 0.5)
        assert abs(L.color_loss(lam * ref, ref).item()) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.2, 1.0), st.floats(0.0, 0.3))
    def test_brightness_affine(self, seed, beta, gamma):
        rng = np.random.default_rng(seed)
        ref = _batch(rng, 1, 9, 9, 0.0, 0.7)
        out = beta * ref + gamma
        assert out.max() <= 1.0
        assert abs(L.brightness_loss(out, ref).item()) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-0.1, 0.1))
    def test_structure_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        x = _batch(rng, 1, 9, 9, 0.1, 0.9)
        ref = _batch(rng, 1, 9, 9, 0.1, 0.9)
        assert abs(L.structure_loss(x + c, ref).item() - L.structure_loss(x, ref).item()) < 1e-6


class TestTotal:
    def test_identical_all_zero(self, pair):
        b = L.total_loss(pair[1], pair[1])
        for name, v in b.as_dict().items():
            assert abs(v) < 1e-5, name

    def test_total_is_sum(self, pair):
        b = L.total_loss(*pair).as_dict()
        assert abs(b["total"] - sum(b[n] for n in L.LOSS_NAMES)) < 1e-6
        assert all(b["total"] >= b[n] for n in L.LOSS_NAMES)

    def test_ablation_flags(self, pair):
        b = L.total_loss(*pair, enabled=L.parse_loss_flags("l1,ssim")).as_dict()
        assert b["color"] == b["brightness"] == b["structure"] == 0.0
        assert b["total"] == pytest.approx(b["l1"] + b["ssim"], abs=1e-12)

    def test_matches_extended_precision(self, pair):
        out, ref = pair
        ours = L.total_loss(out, ref).total.item()
        assert abs(ours - float(R.total_loss(R.as_ld(out), R.as_ld(ref)))) < 1e-10

    @pytest.mark.parametrize("text, expected", [(None, set(L.LOSS_NAMES)), ("all", set(L.LOSS_NAMES)), ("L1, ssim", {"l1", "ssim"})])
    def test_parse_flags(self, text, expected):
        assert L.parse_loss_flags(text) == expected

    @pytest.mark.parametrize("text", ["l1,perceptual", ",", ""])
    def test_parse_flags_rejects(self, text):
        with pytest.raises(ValueError):
            L.parse_loss_flags(text)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RelLossConfig(block_k=4)
        with pytest.raises(ValueError):
            RelLossConfig(block_stride=0)
