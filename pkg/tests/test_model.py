import pytest
import torch

from ecsic import entropy
from ecsic.errors import ConfigError, DimensionError
from ecsic.layers import EpipolarCrossAttention
from ecsic.model import (
    ModelConfig,
    StereoCodec,
    build_ablation_variant,
    split_params,
)

torch.manual_seed(0)


def tiny_cfg(variant="full"):
    return ModelConfig(N=8, M=4, heads=2, embed_dim=8, variant=variant)


def rand_weights_(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.2)
    return module


class TestAttention:
    def test_shape_preserved(self):
        sca = EpipolarCrossAttention(8, 8, 2)
        f_l, f_r = torch.randn(1, 8, 4, 16), torch.randn(1, 8, 4, 16)
        g_l, g_r = sca(f_l, f_r)
        assert g_l.shape == f_l.shape and g_r.shape == f_r.shape

    def test_zero_init_is_identity(self):
        # value/output projections start at zero -> exact residual identity
        sca = EpipolarCrossAttention(8, 8, 2)
        with torch.no_grad():
            sca.proj_q.weight.normal_()
            sca.proj_kv.weight[:8].normal_()  # keys may be anything
        f_l, f_r = torch.randn(1, 8, 4, 16), torch.randn(1, 8, 4, 16)
        g_l, g_r = sca(f_l, f_r)
        assert torch.equal(g_l, f_l)
        assert torch.equal(g_r, f_r)

    def test_row_locality_bitwise(self):
        sca = rand_weights_(EpipolarCrossAttention(8, 8, 2), seed=3)
        f_l = torch.randn(1, 8, 6, 12)
        f_r = torch.randn(1, 8, 6, 12)
        base_l, base_r = sca(f_l, f_r)
        for j in range(6):
            pert = f_r.clone()
            pert[:, :, j] += torch.randn(8, 12)
            out_l, out_r = sca(f_l, pert)
            for i in range(6):
                if i != j:
                    assert torch.equal(out_l[:, :, i], base_l[:, :, i]), (i, j)

    def test_attention_rows_normalized(self):
        sca = rand_weights_(EpipolarCrossAttention(8, 8, 2), seed=4)
        sca.keep_attn = True
        f_l, f_r = torch.randn(2, 8, 4, 10), torch.randn(2, 8, 4, 10)
        sca(f_l, f_r)
        attn = sca.last_attn
        assert (attn >= 0).all()
        assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6)

    def test_shape_mismatch_rejected(self):
        sca = EpipolarCrossAttention(8, 8, 2)
        with pytest.raises(DimensionError):
            sca(torch.randn(1, 8, 4, 16), torch.randn(1, 8, 4, 12))

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            EpipolarCrossAttention(8, 9, 2)
        with pytest.raises(ConfigError):
            EpipolarCrossAttention(8, 8, 2, kernel=4)

    def test_input_gradients_flow(self):
        sca = rand_weights_(EpipolarCrossAttention(4, 4, 2), seed=5).double()
        f_l = torch.randn(1, 4, 2, 6, dtype=torch.float64, requires_grad=True)
        f_r = torch.randn(1, 4, 2, 6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b: sca.attend(a, b).sum(), (f_l, f_r), eps=1e-6, atol=1e-6)


class TestConfig:
    def test_variant_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="nope")
        with pytest.raises(ConfigError):
            build_ablation_variant("nope")
        with pytest.raises(ConfigError):
            ModelConfig(N=8, M=16)
        with pytest.raises(ConfigError):
            ModelConfig(N=8, M=4, heads=3, embed_dim=8)

    def test_embed_default_tracks_n(self):
        assert ModelConfig(N=192, M=48).embed_dim == 384
        assert ModelConfig(N=32, M=8).embed_dim == 64

    def test_variant_sites(self):
        assert build_ablation_variant("enc_sca_only", N=8, M=4, heads=2).has_sca("E")
        assert not build_ablation_variant("enc_sca_only", N=8, M=4, heads=2).has_sca("D")
        dec = build_ablation_variant("dec_sca_only", N=8, M=4, heads=2)
        assert dec.has_sca("D") and not dec.has_sca("E") and not dec.has_sca("hE")
        assert not dec.use_context

    def test_single_sca_instance_count(self):
        def n_sca(cfg):
            m = StereoCodec(cfg)
            return sum(1 for mod in m.modules() if isinstance(mod, EpipolarCrossAttention))

        assert n_sca(tiny_cfg("enc_sca_only")) == 1
        assert n_sca(tiny_cfg("dec_sca_only")) == 1
        assert n_sca(tiny_cfg("baseline")) == 0
        assert n_sca(tiny_cfg("no_context")) == 4
        assert n_sca(tiny_cfg("full")) == 5  # four sites + one inside c_y


class TestShapes:
    def test_paper_scale_anchors(self):
        # channel/stride arithmetic at the published input size; N reduced
        # (it does not affect output shapes), M at its published value
        cfg = ModelConfig(N=64, M=48, heads=4, embed_dim=128)
        m = StereoCodec(cfg).eval()
        x = torch.rand(1, 3, 256, 1024)
        with torch.no_grad():
            y_l, y_r = m.analysis(x, x.clone())
            assert y_l.shape == (1, 48, 32, 128)
            z_l, z_r = m.hyper_analysis(y_l, y_r)
            assert z_l.shape == (1, 48, 8, 32)
            xh_l, xh_r = m.synthesis(y_l, y_r)
            assert xh_l.shape == (1, 3, 256, 1024)

    def test_hyper_synthesis_anchor_full_width(self):
        # phi_y_r must come out with N=192 channels at latent resolution
        cfg = ModelConfig(N=192, M=48, heads=4)
        m = StereoCodec(cfg).eval()
        z = torch.rand(1, 48, 8, 32)
        with torch.no_grad():
            out_l, out_r = m.hyper_synthesis(z, z.clone())
            mu, b = split_params(out_l)
            assert mu.shape == (1, 48, 32, 128) and b.shape == (1, 48, 32, 128)
            assert out_r.shape == (1, 192, 32, 128)
            assert (b >= entropy.B_MIN).all()

    def test_indivisible_input_rejected(self):
        m = StereoCodec(tiny_cfg())
        x = torch.rand(1, 3, 250, 64)
        with pytest.raises(DimensionError):
            m.analysis(x, x)

    def test_context_shapes(self):
        m = StereoCodec(tiny_cfg()).eval()
        with torch.no_grad():
            z = torch.rand(2, 4, 8, 32)
            mu, b = m.theta_z_r(z)
            assert mu.shape == z.shape and b.shape == z.shape
            assert (b >= entropy.B_MIN).all()
            y_hat = torch.rand(2, 4, 32, 128)
            phi = torch.rand(2, 8, 32, 128)
            mu_r, b_r = split_params(m.context_y(y_hat, phi))
            assert mu_r.shape == y_hat.shape


class TestModelProperties:
    def test_identical_views_identical_latents_at_init(self):
        # shared stem + zero-initialized attention values -> y_l == y_r
        m = StereoCodec(tiny_cfg()).eval()
        x = torch.rand(1, 3, 32, 64)
        with torch.no_grad():
            y_l, y_r = m.analysis(x, x.clone())
        assert torch.equal(y_l, y_r)

    def test_batch_consistency(self):
        m = StereoCodec(tiny_cfg()).eval()
        rand_weights_(m, seed=7)
        y1 = torch.rand(1, 4, 8, 16)
        y2 = torch.rand(1, 4, 8, 16)
        yr1 = torch.rand(1, 4, 8, 16)
        yr2 = torch.rand(1, 4, 8, 16)
        with torch.no_grad():
            zb_l, zb_r = m.hyper_analysis(torch.cat([y1, y2]), torch.cat([yr1, yr2]))
            z1_l, z1_r = m.hyper_analysis(y1, yr1)
            z2_l, z2_r = m.hyper_analysis(y2, yr2)
        assert torch.equal(zb_l[0:1], z1_l) and torch.equal(zb_l[1:2], z2_l)
        assert torch.equal(zb_r[0:1], z1_r) and torch.equal(zb_r[1:2], z2_r)

    def test_baseline_has_no_cross_edges(self):
        m = StereoCodec(tiny_cfg("baseline")).eval()
        rand_weights_(m, seed=9)
        x_l = torch.rand(1, 3, 32, 64)
        x_r = torch.rand(1, 3, 32, 64)
        with torch.no_grad():
            y_l, _ = m.analysis(x_l, x_r)
            z_l, _ = m.hyper_analysis(y_l, y_l.clone())
            t_l, _ = m.hyper_synthesis(z_l, z_l.clone())
            xh_l, _ = m.synthesis(y_l, y_l.clone())
            # perturb the right half of everything
            y_l2, _ = m.analysis(x_l, torch.rand_like(x_r))
            z_l2, _ = m.hyper_analysis(y_l2, torch.rand(1, 4, 4, 8))
            t_l2, _ = m.hyper_synthesis(z_l2, torch.rand_like(z_l2))
            xh_l2, _ = m.synthesis(y_l2, torch.rand_like(y_l2))
        assert torch.equal(y_l, y_l2)
        assert torch.equal(z_l, z_l2)
        assert torch.equal(t_l, t_l2)
        assert torch.equal(xh_l, xh_l2)

    def test_theta_z_r_ignores_z_r_and_tracks_z_l(self):
        m = StereoCodec(tiny_cfg()).eval()
        rand_weights_(m, seed=11)
        z_l = torch.rand(1, 4, 4, 8)
        with torch.no_grad():
            mu1, b1 = m.theta_z_r(z_l)
            mu2, b2 = m.theta_z_r(z_l + 0.5)
        assert not torch.equal(mu1, mu2) or not torch.equal(b1, b2)

    def test_theta_y_l_depends_on_both_hyperlatents(self):
        m = StereoCodec(tiny_cfg()).eval()
        rand_weights_(m, seed=13)
        z_l = torch.rand(1, 4, 4, 8)
        z_r = torch.rand(1, 4, 4, 8)
        with torch.no_grad():
            (mu, _), _ = m.theta_y(z_l, z_r)
            (mu_a, _), _ = m.theta_y(z_l + 0.3, z_r)
            (mu_b, _), _ = m.theta_y(z_l, z_r + 0.3)
        assert not torch.equal(mu, mu_a)
        assert not torch.equal(mu, mu_b)

    def test_context_y_receptive_field_rows(self):
        # row j of y_hat_l may touch theta_y_r rows within the conv halo
        # (one k3 conv before the attention, two after -> |i-j| <= 3)
        m = StereoCodec(tiny_cfg()).eval()
        rand_weights_(m, seed=15)
        y_hat = torch.rand(1, 4, 10, 12)
        phi = torch.rand(1, 8, 10, 12)
        with torch.no_grad():
            base = m.context_y(y_hat, phi)
            j = 5
            pert = y_hat.clone()
            pert[:, :, j] += 1.0
            out = m.context_y(pert, phi)
        for i in range(10):
            if abs(i - j) > 3:
                assert torch.equal(out[:, :, i], base[:, :, i]), i

    def test_synthesis_clamps_only_in_eval(self):
        m = StereoCodec(tiny_cfg())
        rand_weights_(m, seed=17)
        y = torch.rand(1, 4, 8, 16) * 10
        m.train()
        xh_train, _ = m.synthesis(y, y.clone())
        m.eval()
        with torch.no_grad():
            xh_eval, _ = m.synthesis(y, y.clone())
        assert xh_train.min() < 0 or xh_train.max() > 1  # raw values escape [0,1]
        assert xh_eval.min() >= 0 and xh_eval.max() <= 1

    def test_quantized_residual_integer(self):
        m = StereoCodec(tiny_cfg()).eval()
        x = torch.rand(1, 3, 32, 64)
        with torch.no_grad():
            y_l, y_r = m.analysis(x, x.clone())
            z_l, z_r = m.hyper_analysis(y_l, y_r)
            mu_zl, _ = m.theta_z_l(z_l)
            zh_l = entropy.quantize(z_l, mu_zl)
        res = zh_l - mu_zl
        assert torch.allclose(res, torch.round(res), atol=1e-5)
