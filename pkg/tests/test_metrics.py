import math

import numpy as np
import pytest
import torch

from ecsic.errors import DimensionError, RangeError
from ecsic.metrics import (
    LOSSLESS,
    MSSSIM_WEIGHTS,
    RDPoint,
    bd_metrics,
    compute_bpp,
    emit_rd_curve,
    ms_ssim,
    psnr,
    read_rd_csv,
)


# ---------------------------------------------------------------------------
# independent MS-SSIM oracle: numpy, non-separable 2D window, direct formula
# ---------------------------------------------------------------------------

def _np_window(win=11, sigma=1.5):
    t = np.arange(win) - (win - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _np_filter(img, k):
    # img (C,H,W), valid-mode 2D correlation per channel
    from numpy.lib.stride_tricks import sliding_window_view

    wins = sliding_window_view(img, k.shape, axis=(1, 2))
    return np.einsum("chwij,ij->chw", wins, k)


def _np_ssim_cs(x, y, k1=0.01, k2=0.03):
    k = _np_window()
    c1, c2 = k1 * k1, k2 * k2
    mx, my = _np_filter(x, k), _np_filter(y, k)
    sxx = _np_filter(x * x, k) - mx * mx
    syy = _np_filter(y * y, k) - my * my
    sxy = _np_filter(x * y, k) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return (lum * cs).mean(), cs.mean()


def _np_downsample(x):
    C, H, W = x.shape
    x = x[:, : H - H % 2, : W - W % 2]
    return 0.25 * (x[:, ::2, ::2] + x[:, 1::2, ::2] + x[:, ::2, 1::2] + x[:, 1::2, 1::2])


def np_ms_ssim(x, y):
    vals = []
    for i, w in enumerate(MSSSIM_WEIGHTS):
        ssim_v, cs_v = _np_ssim_cs(x, y)
        vals.append(max(ssim_v if i == len(MSSSIM_WEIGHTS) - 1 else cs_v, 0.0))
        if i < len(MSSSIM_WEIGHTS) - 1:
            x, y = _np_downsample(x), _np_downsample(y)
    return float(np.prod([v ** w for v, w in zip(vals, MSSSIM_WEIGHTS)]))


def smooth_image(seed, C=3, H=192, W=224):
    rng = np.random.default_rng(seed)
    base = rng.random((C, H // 8, W // 8))
    up = np.kron(base, np.ones((8, 8)))
    return np.clip(up[:, :H, :W] + 0.02 * rng.standard_normal((C, H, W)), 0, 1)


class TestPsnr:
    def test_formula_anchors(self):
        x = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        y = torch.full_like(x, 0.1)  # MSE = 0.01
        assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)
        y2 = torch.full_like(x, 0.01)  # MSE = 1e-4
        assert psnr(x, y2) == pytest.approx(40.0, abs=1e-9)

    def test_lossless_sentinel(self):
        x = torch.rand(2, 3, 4, 4)
        assert psnr(x, x.clone()) == LOSSLESS

    def test_joint_over_views(self):
        x_l = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        x_r = torch.zeros_like(x_l)
        y_l, y_r = torch.full_like(x_l, 0.2), torch.zeros_like(x_r)
        joint = psnr((x_l, x_r), (y_l, y_r))
        # joint MSE = 0.04/2 = 0.02
        assert joint == pytest.approx(10 * math.log10(1 / 0.02), abs=1e-9)

    def test_symmetry_and_mismatch(self):
        a, b = torch.rand(3, 5, 5), torch.rand(3, 5, 5)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)
        with pytest.raises(DimensionError):
            psnr(torch.rand(3, 4, 4), torch.rand(3, 4, 5))


class TestMsSsim:
    def test_identical_is_one(self):
        x = torch.rand(1, 3, 176, 176)
        assert ms_ssim(x, x.clone()) == pytest.approx(1.0, abs=1e-9)

    def test_independent_noise_low(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 176, 176, generator=g)
        y = torch.rand(1, 3, 176, 176, generator=g)
        assert ms_ssim(x, y) < 0.5

    def test_too_small_rejected(self):
        x = torch.rand(1, 3, 128, 176)
        with pytest.raises(DimensionError):
            ms_ssim(x, x)

    def test_matches_independent_implementation(self):
        for seed in range(10):
            x = smooth_image(2 * seed)
            noise = np.random.default_rng(1000 + seed).standard_normal(x.shape)
            y = np.clip(x + 0.05 * noise, 0, 1)
            mine = ms_ssim(torch.from_numpy(x[None]), torch.from_numpy(y[None]))
            oracle = np_ms_ssim(x, y)
            assert mine == pytest.approx(oracle, abs=1e-4), seed

    def test_degradation_monotone(self):
        x = smooth_image(42)
        rng = np.random.default_rng(7)
        noise = rng.standard_normal(x.shape)
        scores = [ms_ssim(torch.from_numpy(x[None]),
                          torch.from_numpy(np.clip(x + s * noise, 0, 1)[None]))
                  for s in (0.01, 0.05, 0.15)]
        assert scores[0] > scores[1] > scores[2]


class TestBpp:
    def test_arithmetic(self):
        class Dummy:
            total_bytes = 8192
            orig_h, orig_w = 64, 128

        assert compute_bpp(Dummy()) == pytest.approx(4.0)

    def test_accounting_identity(self):
        from ecsic.container import HEADER_BYTES, BitstreamContainer

        c = BitstreamContainer(b"\x00" * 8, 64, 128, 64, 128,
                               (b"a" * 10, b"b" * 20, b"c" * 30, b"d" * 40))
        expect = 8 * (HEADER_BYTES + 16 + 100) / (2 * 64 * 128)
        assert compute_bpp(c) == pytest.approx(expect, rel=0, abs=0)


def curve(pairs, label=""):
    return [RDPoint(bpp=b, quality=q, label=label) for b, q in pairs]


class TestBdMetrics:
    REF = [(0.1, 30.0), (0.25, 33.5), (0.55, 36.2), (1.1, 38.4)]

    def test_identical_curves_zero(self):
        r, q = bd_metrics(curve(self.REF), curve(self.REF))
        assert r == 0.0 and q == 0.0

    def test_doubled_rate_plus_100(self):
        test = [(2 * b, q) for b, q in self.REF]
        r, _ = bd_metrics(curve(self.REF), curve(test))
        assert r == pytest.approx(100.0, abs=0.1)

    def test_halved_rate_minus_50(self):
        test = [(b / 2, q) for b, q in self.REF]
        r, _ = bd_metrics(curve(self.REF), curve(test))
        assert r == pytest.approx(-50.0, abs=0.05)

    def test_quality_shift(self):
        test = [(b, q + 1.25) for b, q in self.REF]
        _, dq = bd_metrics(curve(self.REF), curve(test))
        assert dq == pytest.approx(1.25, abs=1e-6)

    def test_antisymmetry(self):
        test = [(b * 1.3, q + 0.4) for b, q in self.REF]
        _, d_ab = bd_metrics(curve(self.REF), curve(test))
        _, d_ba = bd_metrics(curve(test), curve(self.REF))
        assert d_ab == pytest.approx(-d_ba, abs=1e-9)

    def test_two_point_curves(self):
        ref = curve([(0.2, 30.0), (0.8, 36.0)])
        test = curve([(0.3, 30.5), (0.9, 36.5)])
        r, q = bd_metrics(ref, test)
        assert math.isfinite(r) and math.isfinite(q)

    def test_no_overlap_raises(self):
        ref = curve([(0.1, 30.0), (0.2, 32.0)])
        test = curve([(0.5, 40.0), (0.9, 44.0)])
        with pytest.raises(RangeError):
            bd_metrics(ref, test)

    def test_non_monotone_rejected(self):
        with pytest.raises(RangeError):
            bd_metrics(curve([(0.2, 30.0), (0.2, 31.0)]), curve(self.REF))
        with pytest.raises(RangeError):
            bd_metrics(curve([(0.2, 30.0)]), curve(self.REF))


class TestEmitCurve:
    def test_csv_roundtrip_and_plot(self, tmp_path):
        pts = [RDPoint(0.21, 31.5, "full", 0.97), RDPoint(0.55, 34.25, "full", 0.985),
               RDPoint(0.3, 30.0, "baseline")]
        base = tmp_path / "rd"
        csv_path, png_path = emit_rd_curve(pts, base)
        back = read_rd_csv(csv_path)
        assert back == pts
        assert (tmp_path / "rd.png").stat().st_size > 0

    def test_single_point(self, tmp_path):
        csv_path, png_path = emit_rd_curve([RDPoint(0.5, 30.0, "x")], tmp_path / "one")
        assert len(read_rd_csv(csv_path)) == 1
