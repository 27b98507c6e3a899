"""Quantization and discretized-Laplace entropy modelling.

All four coded variables share the same machinery: mean-offset rounding
(hard, STE, or additive-noise proxy) plus a zero-centered Laplace over the
integer residual k = round(y - mu). Scales are kept >= B_MIN through a
softplus mapping; probabilities are floored at 2^-24 so rate estimates and
coded lengths share a worst case.

The integer CDF quantization at the bottom of this file is the exchange
format with the range coder. Its arithmetic is deliberately scalar and
rounding-explicit so an independent implementation can match it bit for bit.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

B_MIN = 1e-3
PROB_FLOOR = 2.0 ** -24
LOG2_E = math.log2(math.e)

PRECISION = 16
MAX_ABS_SYMBOL = 64


def round_half_away(x):
    # torch.round is half-to-even; the bitstream needs half-away-from-zero
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(y, mu):
    """Mean-offset quantization: round(y - mu) + mu.

    The residual y_hat - mu is integer-valued, which is what actually gets
    entropy coded; mu is added back so the synthesis transform sees values
    on the original scale.
    """
    if y.shape != mu.shape:
        raise DimensionError(f"shape mismatch: {tuple(y.shape)} vs {tuple(mu.shape)}")
    return round_half_away(y - mu) + mu


def ste_quantize(y, mu):
    """quantize() in the forward pass, identity in the backward pass.

    Written as q + (y - y.detach()) rather than y + (q - y).detach() so the
    forward value is bit-identical to quantize(); the second form picks up
    one float rounding.
    """
    return quantize(y.detach(), mu) + (y - y.detach())


def noise_proxy(y, generator=None):
    """Additive U(-0.5, 0.5) noise, the differentiable stand-in for rounding."""
    u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device)
    return y + (u - 0.5)


def scale_from_raw(raw):
    # keeps b >= B_MIN with full gradient everywhere
    return B_MIN + F.softplus(raw)


def raw_from_scale(b):
    """Inverse of scale_from_raw, for initialising raw parameters."""
    x = b - B_MIN
    return math.log(math.expm1(x)) if x < 20.0 else x


def laplace_cdf(x: float, b: float) -> float:
    if x < 0.0:
        return 0.5 * math.exp(x / b)
    return 1.0 - 0.5 * math.exp(-x / b)


def laplace_discrete_pmf(k: int, b: float) -> float:
    """P(round(v) == k) for v ~ Laplace(0, b), i.e. F(k+0.5) - F(k-0.5).

    Closed forms keep full double precision near k=0 where the naive
    CDF difference would cancel.
    """
    if k == 0:
        return -math.expm1(-0.5 / b)
    a = abs(k)
    return -0.5 * math.exp(-(a - 0.5) / b) * math.expm1(-1.0 / b)


def likelihood(x, mu, b):
    """Discretized Laplace probability of the unit bin centered at x - mu.

    Works for integer-valued residuals (exact pmf) and for noisy training
    proxies alike. Branches are written so no exponent is ever positive,
    which keeps the unselected side of each where() finite and the backward
    pass NaN-free.
    """
    a = torch.abs(x - mu)
    e_mid = torch.exp(-(a + 0.5) / b)
    e_out = torch.exp(-F.relu(a - 0.5) / b)
    e_in = torch.exp(-F.relu(0.5 - a) / b)
    tail = 0.5 * (e_out - e_mid)
    center = 1.0 - 0.5 * (e_mid + e_in)
    return torch.where(a >= 0.5, tail, center)


RATE_CAP_BITS = 24.0  # == -log2(PROB_FLOOR)
_LN2 = math.log(2.0)


class _CapBits(torch.autograd.Function):
    """clamp_max in the forward pass, identity in the backward pass.

    Not expressible as arithmetic on the inputs: the subtract-a-detached-
    residual trick cancels catastrophically once bits reaches ~1e13 in
    float32, silently returning 0 instead of the cap.
    """

    @staticmethod
    def forward(ctx, bits):
        return bits.clamp_max(RATE_CAP_BITS)

    @staticmethod
    def backward(ctx, grad):
        return grad


def _log1mexp(x):
    # log(1 - e^-x) for x > 0; the small-x form avoids the total loss of
    # precision (or a flushed-to-zero denormal) in 1 - e^-x. Clamps keep the
    # unselected side of the where() finite in value and gradient.
    big = torch.log((-torch.expm1(-x.clamp_min(1e-8))).clamp_min(1e-38))
    small = torch.log(x.clamp_min(1e-38)) - 0.5 * x
    return torch.where(x < 1e-4, small, big)


def _bits_uncapped(x, mu, b):
    a = torch.abs(x - mu)
    inv_b = 1.0 / b
    # tail (a >= 0.5): ln p = ln 0.5 - (a - 0.5)/b + log(1 - e^(-1/b))
    tail_bits = 1.0 + ((a - 0.5) * inv_b - _log1mexp(inv_b)) / _LN2
    # center (a < 0.5): p = 0.5 * (f(u) + f(v)), f(t) = 1 - e^-t, computed
    # through expm1; for 1/b below 1e-4 the sum collapses to 1/b itself
    u = (a + 0.5) * inv_b
    v = (0.5 - a).clamp_min(0.0) * inv_b
    s = (-(torch.expm1(-u) + torch.expm1(-v))).clamp_min(1e-38)
    center_ln = torch.where(inv_b < 1e-4,
                            torch.log(inv_b.clamp_min(1e-38)), torch.log(s))
    center_bits = 1.0 - center_ln / _LN2
    return torch.where(a >= 0.5, tail_bits, center_bits)


def rate_bits_elements(x, mu, b):
    """Per-element coded-rate bound in bits: min(-log2 p, 24) with p the
    unit-bin Laplace mass at x - mu.

    Evaluated in log space so value and gradient stay finite for residuals
    and scales of any magnitude (the probability itself underflows long
    before float32 runs out of exponent). The 24-bit cap mirrors the 2^-24
    probability floor shared with the coder tables, and is applied straight
    through: the capped VALUE matches the coded worst case, while the slope
    keeps pulling oversized residuals back. A hard clamp would zero that
    slope, and a model whose rates saturate could then grow its latents for
    free -- the observed runaway mode.
    """
    return _CapBits.apply(_bits_uncapped(x, mu, b))


# Repulsion band for the training stabilizer below: ONSET sits a few bits
# under the cap so elements are pushed back before their rate saturates,
# the scale floor bounds the 1/b slope a collapsed prediction would
# otherwise inject, and MAX is where the penalty's growth turns linear so
# elements already far outside the representable range are pulled back with
# bounded force (a hard clamp would leave them no gradient at all: the
# capped base rate is flat there too, and nothing else pulls inward).
OVERFLOW_ONSET_BITS = RATE_CAP_BITS - 4.0
OVERFLOW_MAX_BITS = 48.0
OVERFLOW_SCALE_FLOOR = 0.05


def overflow_bits_elements(x, mu, b):
    """Bits by which each element's uncapped rate exceeds the repulsion onset.

    The scale is detached and floored, so downstream penalties push residuals
    (and the means predicting them), never the scales, and a collapsed scale
    cannot turn the term into a gradient bomb.
    """
    b_safe = b.detach().clamp_min(OVERFLOW_SCALE_FLOOR)
    return (_bits_uncapped(x, mu, b_safe) - OVERFLOW_ONSET_BITS).clamp_min(0.0)


def overflow_penalty_elements(x, mu, b):
    """Squared overflow with a linear tail past OVERFLOW_MAX_BITS.

    Training-only repulsion: the base Laplace rate pulls an oversized residual
    back with a force that is constant in the residual (the tail is linear),
    so once a latent drifts past the cap the marginal rate cost stops growing
    while whatever reward drove the drift keeps growing. Squaring the excess
    gives a restoring force that grows with it; beyond MAX the square
    continues along its tangent, so the force saturates at 2*MAX bits of
    slope instead of vanishing or exploding.
    """
    over = overflow_bits_elements(x, mu, b)
    capped = over.clamp_max(OVERFLOW_MAX_BITS)
    return capped * capped + 2.0 * OVERFLOW_MAX_BITS * (over - capped)


def rate_bits(x, mu, b):
    """Total coded-rate bound in bits (sum of rate_bits_elements)."""
    return rate_bits_elements(x, mu, b).sum()


class LearnedPrior(nn.Module):
    """Factorized prior for the first coded variable.

    Per-channel (raw_mu, raw_b) pairs with the positive mapping applied on
    read, plus the learned conditioning map phi_z_r handed to the
    hyperlatent context module for the second view. All of it trains with
    the rest of the model and is frozen afterwards.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.raw_mu = nn.Parameter(torch.zeros(channels))
        self.raw_b = nn.Parameter(torch.full((channels,), raw_from_scale(1.0)))
        self.phi_z_r = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def params(self, like):
        """Broadcast (mu, b) maps matching a (B, C, H, W) reference tensor."""
        mu = self.raw_mu.view(1, -1, 1, 1).expand_as(like)
        b = scale_from_raw(self.raw_b).view(1, -1, 1, 1).expand_as(like)
        return mu, b


# ---------------------------------------------------------------------------
# Integer CDF tables for the range coder.
#
# Every float operation below is scalar C-library math on doubles. The fast
# coder reimplements this function; the two must agree on every table entry.
# ---------------------------------------------------------------------------

class QuantizedCDF:
    """Frequency table over symbols [symbol_lo .. symbol_hi] plus an escape.

    cumulative[i] is the mass below the i-th symbol; cumulative[-1] is
    exactly 2^precision. The escape symbol sits after symbol_hi and routes
    out-of-range residuals to fixed-length bypass coding.
    """

    __slots__ = ("precision", "symbol_lo", "symbol_hi", "cumulative", "has_bypass_tail")

    def __init__(self, precision, symbol_lo, symbol_hi, cumulative, has_bypass_tail=True):
        self.precision = precision
        self.symbol_lo = symbol_lo
        self.symbol_hi = symbol_hi
        self.cumulative = cumulative
        self.has_bypass_tail = has_bypass_tail

    @property
    def num_symbols(self):
        return self.symbol_hi - self.symbol_lo + 1 + (1 if self.has_bypass_tail else 0)

    def index_of(self, k: int) -> int:
        """Coding index for residual k; the escape index if out of range."""
        if self.symbol_lo <= k <= self.symbol_hi:
            return k - self.symbol_lo
        return self.symbol_hi - self.symbol_lo + 1

    def span(self, index):
        return self.cumulative[index], self.cumulative[index + 1]


def _core_radius(b: float, precision: int, max_abs_symbol: int) -> int:
    # largest k whose pmf still earns at least one count at this precision;
    # symbol 0 always stays in core
    scale = float(1 << precision)
    hi = 0
    for k in range(1, max_abs_symbol + 1):
        if laplace_discrete_pmf(k, b) * scale >= 1.0:
            hi = k
        else:
            break
    return hi


def build_cdf(b: float, precision: int = PRECISION, max_abs_symbol: int = MAX_ABS_SYMBOL) -> QuantizedCDF:
    """Quantize the Laplace pmf to integer frequencies summing to 2^precision.

    Core symbols are [-A .. A] where A is the largest residual whose true
    pmf earns >= 1 count (capped at max_abs_symbol); everything else shares
    one escape symbol. Targets t_i = pmf * 2^precision are floored with a
    minimum of 1, then the leftover mass is settled deterministically:
    surplus goes +1 at a time to the largest fractional remainders
    (ties: lower index first), deficit is taken -1 at a time from the
    largest frequency still >= 2 (ties: lower index first). The result is
    independent of platform as long as exp/expm1 agree to the last bit.
    """
    if not 8 <= precision <= 24:
        raise ConfigError(f"precision {precision} outside [8, 24]")
    if b < B_MIN:
        b = B_MIN

    total = 1 << precision
    radius = _core_radius(b, precision, max_abs_symbol)
    symbols = list(range(-radius, radius + 1))

    targets = [laplace_discrete_pmf(k, b) * total for k in symbols]
    core_mass = 0.0
    for k in symbols:  # plain left-to-right sum, reproducible in any language
        core_mass += laplace_discrete_pmf(k, b)
    targets.append(max(0.0, 1.0 - core_mass) * total)  # escape

    freqs = [max(1, math.floor(t)) for t in targets]
    deficit = total - sum(freqs)

    if deficit > 0:
        # +1 to the largest remainders, cycling if necessary
        order = sorted(range(len(targets)), key=lambda i: (-(targets[i] - math.floor(targets[i])), i))
        pos = 0
        while deficit > 0:
            freqs[order[pos % len(order)]] += 1
            deficit -= 1
            pos += 1
    while deficit < 0:
        best = -1
        for i, f in enumerate(freqs):
            if f >= 2 and (best < 0 or f > freqs[best]):
                best = i
        if best < 0:
            raise ValueError("cannot satisfy min frequency 1 at this precision")
        freqs[best] -= 1
        deficit += 1

    cumulative = [0]
    for f in freqs:
        cumulative.append(cumulative[-1] + f)
    assert cumulative[-1] == total

    return QuantizedCDF(precision, -radius, radius, cumulative, has_bypass_tail=True)
