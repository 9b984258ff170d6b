import numpy.testing as npt
import pytest
import torch

from remotenet.exceptions import ConfigError, ShapeError
from remotenet.refine import FeatureRefinement, SegmentationHead
from remotenet.verification import grad_check, randomize_for_check


class TestFeatureRefinement:
    def test_off_mode_is_identity(self, torch_gen):
        frm = FeatureRefinement(8, mode="off")
        x = torch.randn(2, 8, 5, 5, generator=torch_gen)
        npt.assert_array_equal(frm(x).numpy(), x.numpy())

    def test_shape_preserved(self, torch_gen):
        frm = FeatureRefinement(64).eval()
        x = torch.randn(1, 64, 32, 32, generator=torch_gen)
        with torch.no_grad():
            assert tuple(frm(x).shape) == (1, 64, 32, 32)

    def test_two_branch_drops_exactly_the_1x1_branch(self):
        count = lambda m: sum(p.numel() for p in m.parameters())
        full = FeatureRefinement(64, mode="full")
        two = FeatureRefinement(64, mode="two_branch")
        assert count(full) - count(two) == 64 * 64 + 64

    def test_full_wiring(self, torch_gen):
        frm = FeatureRefinement(8).eval()
        x = torch.randn(1, 8, 6, 6, generator=torch_gen)
        with torch.no_grad():
            got = frm(x)
            y = x + frm.merge(torch.cat([frm.branch1(x), frm.branch2(x)], dim=1))
            y = y + frm.branch3(x)
            expected = y + frm.post_act(frm.post_norm(frm.post_conv(y)))
        npt.assert_array_equal(got.numpy(), expected.numpy())

    def test_wrong_channels_rejected(self):
        frm = FeatureRefinement(8)
        with pytest.raises(ShapeError):
            frm(torch.randn(1, 16, 4, 4))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            FeatureRefinement(8, mode="one_branch")

    def test_gradients_match_finite_differences(self, torch_gen):
        frm = FeatureRefinement(8).double()
        randomize_for_check(frm, seed=2, scale=0.2)
        x = torch.randn(1, 8, 4, 4, generator=torch_gen, dtype=torch.float64)
        labels = torch.randint(0, 8, (1, 4, 4), generator=torch_gen)
        report = grad_check(frm, x, labels, tol=1e-4)
        assert report.passed, report.summary()


class TestSegmentationHead:
    def test_upsamples_to_target(self, torch_gen):
        head = SegmentationHead(64, 7)
        x = torch.randn(1, 64, 16, 16, generator=torch_gen)
        with torch.no_grad():
            out = head(x, (64, 64))
        assert tuple(out.shape) == (1, 7, 64, 64)

    def test_factor_one_is_pure_projection(self, torch_gen):
        head = SegmentationHead(8, 3)
        x = torch.randn(1, 8, 6, 6, generator=torch_gen)
        with torch.no_grad():
            got = head(x, (6, 6))
            expected = head.proj(x)
        npt.assert_array_equal(got.numpy(), expected.numpy())

    def test_bilinear_preserves_constants(self):
        head = SegmentationHead(4, 2)
        with torch.no_grad():
            out = head(torch.ones(1, 4, 3, 3), (12, 12))
            expected = head(torch.ones(1, 4, 3, 3), (3, 3))[0, :, 0, 0]
        for c in range(2):
            npt.assert_allclose(out[0, c].numpy(), float(expected[c]), atol=1e-6)

    def test_downscale_target_rejected(self, torch_gen):
        head = SegmentationHead(8, 3)
        with pytest.raises(ConfigError):
            head(torch.randn(1, 8, 8, 8, generator=torch_gen), (4, 4))

    def test_wrong_channels_rejected(self):
        head = SegmentationHead(8, 3)
        with pytest.raises(ShapeError):
            head(torch.randn(1, 4, 8, 8), (8, 8))
