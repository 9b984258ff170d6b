import numpy.testing as npt
import pytest
import torch

from remotenet.exceptions import ShapeError
from remotenet.fusion import AttentionMapModule, FeatureFusion
from remotenet.verification import amm_param_count


class TestAttentionMapModule:
    def test_identity_conv_on_zero_input_gives_half(self):
        amm = AttentionMapModule(4)
        with torch.no_grad():
            amm.conv.weight.zero_()
            for i in range(4):
                amm.conv.weight[i, i, 0, 0] = 1.0
            amm.conv.bias.zero_()
        scores = amm(torch.zeros(2, 4, 5, 5))
        npt.assert_array_equal(scores.detach().numpy(), 0.5)

    def test_scores_strictly_inside_unit_interval(self, torch_gen):
        amm = AttentionMapModule(8)
        x = torch.randn(3, 8, 6, 6, generator=torch_gen)
        scores = amm(x).detach()
        assert (scores > 0).all() and (scores < 1).all()

    def test_score_shape_is_channelwise(self, torch_gen):
        amm = AttentionMapModule(64)
        x = torch.randn(1, 64, 32, 32, generator=torch_gen)
        assert tuple(amm(x).shape) == (1, 64, 1, 1)


class TestFeatureFusion:
    def test_no_fusion_is_plain_sum(self, torch_gen):
        fuse = FeatureFusion(8, ablation="no_fusion")
        e = torch.randn(2, 8, 6, 6, generator=torch_gen)
        d = torch.randn(2, 8, 6, 6, generator=torch_gen)
        npt.assert_array_equal(fuse(e, d).numpy(), (e + d).numpy())

    def test_no_fusion_has_no_parameters(self):
        assert list(FeatureFusion(8, ablation="no_fusion").parameters()) == []

    def test_no_amm_equals_unit_scores(self, torch_gen):
        fuse = FeatureFusion(8, ablation="no_amm").eval()
        e = torch.randn(1, 8, 4, 4, generator=torch_gen)
        d = torch.randn(1, 8, 4, 4, generator=torch_gen)
        with torch.no_grad():
            got = fuse(e, d)
            f = fuse.conv_enc(e) + fuse.conv_dec(d)  # s = 1 on both branches
            expected = f + fuse.post_act(fuse.post_norm(fuse.post_conv(f)))
        npt.assert_array_equal(got.numpy(), expected.numpy())

    def test_full_wiring_shares_one_score(self, torch_gen):
        fuse = FeatureFusion(8, ablation="full").eval()
        e = torch.randn(1, 8, 4, 4, generator=torch_gen)
        d = torch.randn(1, 8, 4, 4, generator=torch_gen)
        with torch.no_grad():
            got = fuse(e, d)
            s = fuse.amm(e + d)
            f = s * fuse.conv_enc(e) + s * fuse.conv_dec(d)
            expected = f + fuse.post_act(fuse.post_norm(fuse.post_conv(f)))
        npt.assert_array_equal(got.numpy(), expected.numpy())

    def test_shape_contract(self, torch_gen):
        fuse = FeatureFusion(64).eval()
        e = torch.randn(1, 64, 64, 64, generator=torch_gen)
        d = torch.randn(1, 64, 64, 64, generator=torch_gen)
        with torch.no_grad():
            assert tuple(fuse(e, d).shape) == (1, 64, 64, 64)

    def test_spatial_mismatch_rejected(self, torch_gen):
        fuse = FeatureFusion(8)
        with pytest.raises(ShapeError, match="upsample"):
            fuse(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))

    def test_batch_permutation_equivariance(self, torch_gen):
        fuse = FeatureFusion(8).eval()
        e = torch.randn(3, 8, 4, 4, generator=torch_gen)
        d = torch.randn(3, 8, 4, 4, generator=torch_gen)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            npt.assert_allclose(fuse(e, d)[perm].numpy(),
                                fuse(e[perm], d[perm]).numpy(), atol=1e-6)

    def test_amm_parameter_delta_is_exact(self):
        full = FeatureFusion(8, ablation="full")
        no_amm = FeatureFusion(8, ablation="no_amm")
        count = lambda m: sum(p.numel() for p in m.parameters())
        assert count(full) - count(no_amm) == 8 * 8 + 8

    def test_per_branch_variant(self, torch_gen):
        fuse = FeatureFusion(8, ablation="full", per_branch=True).eval()
        e = torch.randn(1, 8, 4, 4, generator=torch_gen)
        d = torch.randn(1, 8, 4, 4, generator=torch_gen)
        with torch.no_grad():
            got = fuse(e, d)
            f = fuse.amm_enc(e) * fuse.conv_enc(e) + fuse.amm_dec(d) * fuse.conv_dec(d)
            expected = f + fuse.post_act(fuse.post_norm(fuse.post_conv(f)))
        npt.assert_array_equal(got.numpy(), expected.numpy())


def test_amm_param_count_matches_module(tiny_cfg):
    per_site = AttentionMapModule(tiny_cfg.decoder_dim)
    module_count = sum(p.numel() for p in per_site.parameters())
    assert amm_param_count(tiny_cfg) == 3 * module_count
