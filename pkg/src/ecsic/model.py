"""Trainable transforms of the stereo codec.

Four coded variables per pair: latents (y_l, y_r) at 1/8 resolution and
hyperlatents (z_l, z_r) at 1/32. The analysis/synthesis transforms process
both views with shared convolution weights; cross-view information flows
only through the row-restricted attention blocks and, on the entropy side,
through the two context modules:

    theta_z_r = c_z(z_hat_l, phi_z_r)        phi_z_r learned
    theta_y_r = c_y(y_hat_l, phi_y_r)        phi_y_r predicted by the
                                             hyper-synthesis right head

The left-view parameters come from a per-channel learned prior (z_l) and
from the hyper-synthesis left head (y_l). Ablation variants drop attention
sites and/or the context modules; with contexts off, the right streams get
their own learned prior (z_r) and a direct parameter head (y_r), leaving two
codecs that share weights but exchange no information in `baseline`.

Implementation note: the two views ride through every shared transform as
one stacked batch [left; right]. Convolutions, norms, and attention all act
per sample, so each view's values are exactly what two separate calls would
produce; stacking exists purely to halve the kernel-launch count.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import entropy
from .errors import ConfigError, DimensionError
from .layers import EpipolarCrossAttention

VARIANTS = ("full", "baseline", "enc_sca_only", "dec_sca_only", "no_context")


@dataclass
class ModelConfig:
    N: int = 192
    M: int = 48
    heads: int = 4
    embed_dim: int = 0  # 0 -> 2*N
    sca_kernel: int = 3
    variant: str = "full"

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = 2 * self.N
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not (self.N >= self.M >= 1):
            raise ConfigError(f"need N >= M >= 1, got N={self.N} M={self.M}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.sca_kernel % 2 != 1:
            raise ConfigError(f"sca_kernel must be odd, got {self.sca_kernel}")

    @property
    def use_context(self):
        return self.variant == "full"

    def has_sca(self, site: str) -> bool:
        if self.variant in ("full", "no_context"):
            return True
        if self.variant == "enc_sca_only":
            return site == "E"
        if self.variant == "dec_sca_only":
            return site == "D"
        return False  # baseline

    def to_dict(self):
        return {
            "N": self.N, "M": self.M, "heads": self.heads,
            "embed_dim": self.embed_dim, "sca_kernel": self.sca_kernel,
            "variant": self.variant,
        }


def build_ablation_variant(name: str, N: int = 192, M: int = 48, **kw) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}, expected one of {VARIANTS}")
    return ModelConfig(N=N, M=M, variant=name, **kw)


def conv(cin, cout, k, s):
    return nn.Conv2d(cin, cout, k, stride=s, padding=k // 2)


def deconv(cin, cout, k, s):
    return nn.ConvTranspose2d(cin, cout, k, stride=s, padding=k // 2, output_padding=s - 1)


def _pair(t):
    """Split a stacked [left; right] batch back into the two views."""
    b = t.shape[0] // 2
    return t[:b], t[b:]


class _ScaSite(nn.Module):
    """Attention block plus its activation; variants that drop the site drop
    both. Operates on the stacked [left; right] batch."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sca = EpipolarCrossAttention(cfg.N, cfg.embed_dim, cfg.heads, cfg.sca_kernel)
        self.act = nn.PReLU(cfg.N)

    def forward(self, f):
        f_l, f_r = _pair(f)
        g = self.sca.attend(f, torch.cat([f_r, f_l]))  # both directions at once
        return self.act(g)


class AnalysisTransform(nn.Module):
    """(x_l, x_r) -> (y_l, y_r); weights shared between the views.

    Three stride-2 convolutions, the attention site, then the output
    convolution. Requires H and W divisible by 8.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N = cfg.N
        self.stem = nn.Sequential(
            conv(3, N, 5, 2), nn.PReLU(N),
            conv(N, N, 5, 2), nn.PReLU(N),
            conv(N, N, 5, 2), nn.PReLU(N),
        )
        self.sca = _ScaSite(cfg) if cfg.has_sca("E") else None
        self.head = conv(N, cfg.M, 3, 1)

    def forward(self, x_l, x_r):
        if x_l.shape[-1] % 8 or x_l.shape[-2] % 8:
            raise DimensionError(f"input {tuple(x_l.shape)} not divisible by 8")
        f = self.stem(torch.cat([x_l, x_r]))
        if self.sca is not None:
            f = self.sca(f)
        return _pair(self.head(f))


class HyperAnalysis(nn.Module):
    """(y_l, y_r) -> (z_l, z_r); two stride-2 convolutions, attention,
    output convolution; shared weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N = cfg.N
        self.stem = nn.Sequential(
            conv(cfg.M, N, 5, 2), nn.PReLU(N),
            conv(N, N, 5, 2), nn.PReLU(N),
        )
        self.sca = _ScaSite(cfg) if cfg.has_sca("hE") else None
        self.head = conv(N, cfg.M, 3, 1)

    def forward(self, y_l, y_r):
        if y_l.shape[-1] % 4 or y_l.shape[-2] % 4:
            raise DimensionError(f"latent {tuple(y_l.shape)} not divisible by 4")
        f = self.stem(torch.cat([y_l, y_r]))
        if self.sca is not None:
            f = self.sca(f)
        return _pair(self.head(f))


class HyperSynthesis(nn.Module):
    """(z_hat_l, z_hat_r) -> (theta_y_l, second)

    Shared trunk (upsample, attention, upsample) with per-view heads. The
    left head always yields theta_y_l (2M channels). With contexts on, the
    right head emits the N-channel conditioning map phi_y_r consumed by c_y;
    with contexts off it emits theta_y_r directly.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N, M = cfg.N, cfg.M
        self.up1 = nn.Sequential(deconv(M, N, 5, 2), nn.PReLU(N))
        self.sca = _ScaSite(cfg) if cfg.has_sca("hD") else None
        self.up2 = nn.Sequential(deconv(N, N, 5, 2), nn.PReLU(N))
        self.head_l = conv(N, 2 * M, 3, 1)
        self.head_r = conv(N, N if cfg.use_context else 2 * M, 3, 1)

    def forward(self, z_hat_l, z_hat_r):
        f = self.up1(torch.cat([z_hat_l, z_hat_r]))
        if self.sca is not None:
            f = self.sca(f)
        f_l, f_r = _pair(self.up2(f))
        return self.head_l(f_l), self.head_r(f_r)


class SynthesisTransform(nn.Module):
    """(y_hat_l, y_hat_r) -> (x_hat_l, x_hat_r); shared weights.

    One resolution-preserving convolution, then three stride-2 transposed
    convolutions, with attention after the first upsampling step. Outputs
    are clamped to [0,1] in eval mode only; training needs the raw values.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N = cfg.N
        self.stem = nn.Sequential(conv(cfg.M, N, 3, 1), nn.PReLU(N), deconv(N, N, 5, 2), nn.PReLU(N))
        self.sca = _ScaSite(cfg) if cfg.has_sca("D") else None
        self.tail = nn.Sequential(deconv(N, N, 5, 2), nn.PReLU(N), deconv(N, 3, 5, 2))

    def forward(self, y_hat_l, y_hat_r):
        f = self.stem(torch.cat([y_hat_l, y_hat_r]))
        if self.sca is not None:
            f = self.sca(f)
        x = self.tail(f)
        if not self.training:
            x = x.clamp(0.0, 1.0)
        return _pair(x)


class ContextZ(nn.Module):
    """theta_z_r = c_z(z_hat_l, phi_z_r): predicts the right hyperlatent's
    entropy parameters from the decoded left hyperlatent and a learned map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N, M = cfg.N, cfg.M
        self.net = nn.Sequential(
            conv(2 * M, N, 3, 1), nn.PReLU(N),
            conv(N, N, 3, 1), nn.PReLU(N),
            conv(N, 2 * M, 3, 1),
        )

    def forward(self, z_hat_l, phi_z_r):
        phi = phi_z_r.expand(z_hat_l.shape[0], -1, *z_hat_l.shape[-2:])
        return self.net(torch.cat([z_hat_l, phi], dim=1))


class ContextY(nn.Module):
    """theta_y_r = c_y(y_hat_l, phi_y_r).

    Two branches (decoded left latent / conditioning map) joined by a
    one-directional attention: the phi branch queries the y_hat_l branch.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N, M = cfg.N, cfg.M
        self.branch_y = nn.Sequential(conv(M, N, 3, 1), nn.PReLU(N))
        self.branch_phi = nn.Sequential(conv(N, N, 3, 1), nn.PReLU(N))
        self.sca = EpipolarCrossAttention(N, cfg.embed_dim, cfg.heads, cfg.sca_kernel)
        self.act = nn.PReLU(N)
        self.tail = nn.Sequential(conv(N, N, 3, 1), nn.PReLU(N), conv(N, 2 * M, 3, 1))

    def forward(self, y_hat_l, phi_y_r):
        a = self.branch_y(y_hat_l)
        b = self.branch_phi(phi_y_r)
        joined = self.act(self.sca.attend(b, a))  # phi side queries the left latent
        return self.tail(joined)


def split_params(theta):
    """(2M)-channel map -> (mu, b) with the positive scale mapping applied."""
    m = theta.shape[1] // 2
    return theta[:, :m], entropy.scale_from_raw(theta[:, m:])


class StereoCodec(nn.Module):
    """All transforms plus the learned priors, wired per variant."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.analysis = AnalysisTransform(cfg)
        self.hyper_analysis = HyperAnalysis(cfg)
        self.hyper_synthesis = HyperSynthesis(cfg)
        self.synthesis = SynthesisTransform(cfg)
        self.prior_z_l = entropy.LearnedPrior(cfg.M)
        if cfg.use_context:
            self.context_z = ContextZ(cfg)
            self.context_y = ContextY(cfg)
            self.prior_z_r = None
        else:
            self.context_z = None
            self.context_y = None
            self.prior_z_r = entropy.LearnedPrior(cfg.M)

    def theta_z_l(self, like):
        return self.prior_z_l.params(like)

    def theta_z_r(self, z_hat_l):
        """Right-hyperlatent parameters from decoded-left quantities only."""
        if self.context_z is not None:
            return split_params(self.context_z(z_hat_l, self.prior_z_l.phi_z_r))
        return self.prior_z_r.params(z_hat_l)

    def theta_y(self, z_hat_l, z_hat_r, y_hat_l=None):
        """Latent parameters; theta_y_r needs y_hat_l when contexts are on.

        Returns theta_l, right_thing where right_thing is (mu_r, b_r) if
        computable now, else a callable awaiting y_hat_l.
        """
        out_l, out_r = self.hyper_synthesis(z_hat_l, z_hat_r)
        theta_l = split_params(out_l)
        if self.context_y is None:
            return theta_l, split_params(out_r)
        if y_hat_l is not None:
            return theta_l, split_params(self.context_y(y_hat_l, out_r))
        return theta_l, lambda y_hat: split_params(self.context_y(y_hat, out_r))
