"""Pair-level encode/decode: causal chunk ordering and the .ecsic container.

Chunk order on file is z_l, z_r, y_l, y_r; each later chunk's entropy
parameters are computable from the already-decoded earlier chunks plus
checkpoint constants, so the decoder never needs encoder-side state.
"""

import math
import struct
import time
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import coder as coder_mod
from . import entropy
from .checkpoint import model_hash
from .errors import CorruptStreamError, ModelMismatchError, NumericsError

MAGIC = b"ECS1"
VERSION = 1
PAD_MULTIPLE = 32
_HEADER = struct.Struct("<4sB8s4HI")  # magic, version, hash, H, W, origH, origW, reserved
HEADER_BYTES = _HEADER.size  # 25

# Laplace scales are binned at 1% log spacing for table sharing; both sides
# derive identical bins from their (bit-identical) entropy parameters, and
# the rate cost of the binning is far below the accounting tolerances.
_LOG_STEP = math.log(1.01)
_MAX_BIN = int(math.ceil(math.log(1e4 / entropy.B_MIN) / _LOG_STEP))


class ReferenceCoder:
    """Default entropy-coding backend: the pure-Python range coder."""

    name = "reference"

    def encode(self, symbols, cdfs):
        return coder_mod.ac_encode(symbols, cdfs)

    def decode(self, data, cdfs, n):
        return coder_mod.ac_decode(data, cdfs, n)


def get_coder(name="reference"):
    """Resolve an entropy-coding backend by name.

    Returns (coder, warning). The fast backend is optional at runtime:
    when its shared library is absent the reference coder is returned with
    a warning string, keeping every workflow self-contained.
    """
    from .errors import ConfigError

    if name == "reference":
        return ReferenceCoder(), None
    if name == "fast":
        try:
            from .fast import FastCoder
            return FastCoder(), None
        except (ImportError, OSError) as e:
            return ReferenceCoder(), f"fast coder unavailable ({e}); using reference coder"
    raise ConfigError(f"unknown coder {name!r} (expected reference or fast)")


class CdfBank:
    """Lazily built quantized-CDF tables indexed by binned Laplace scale."""

    def __init__(self):
        self._tables = {}

    @staticmethod
    def bin_indices(b):
        if not torch.isfinite(b).all():
            raise NumericsError("non-finite entropy scale")
        idx = torch.round(torch.log(b / entropy.B_MIN) / _LOG_STEP)
        return idx.clamp_(0, _MAX_BIN).to(torch.long)

    def table(self, idx: int):
        t = self._tables.get(idx)
        if t is None:
            t = entropy.build_cdf(entropy.B_MIN * math.exp(idx * _LOG_STEP))
            self._tables[idx] = t
        return t

    def tables_for(self, b):
        return [self.table(int(i)) for i in self.bin_indices(b).flatten().tolist()]


@dataclass
class BitstreamContainer:
    model_hash: bytes
    coded_h: int
    coded_w: int
    orig_h: int
    orig_w: int
    chunks: tuple  # bytes for z_l, z_r, y_l, y_r
    version: int = VERSION

    @property
    def chunk_sizes(self):
        return tuple(len(c) for c in self.chunks)

    @property
    def total_bytes(self):
        return HEADER_BYTES + sum(4 + len(c) for c in self.chunks)

    def to_bytes(self) -> bytes:
        out = [_HEADER.pack(MAGIC, self.version, self.model_hash,
                            self.coded_h, self.coded_w, self.orig_h, self.orig_w, 0)]
        for c in self.chunks:
            out.append(struct.pack("<I", len(c)))
            out.append(c)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes):
        if len(data) < HEADER_BYTES:
            raise CorruptStreamError("container shorter than header")
        magic, version, mhash, h, w, oh, ow, _ = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported container version {version}")
        chunks, off = [], HEADER_BYTES
        for _ in range(4):
            if off + 4 > len(data):
                raise CorruptStreamError("truncated chunk header")
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n > len(data):
                raise CorruptStreamError("truncated chunk body")
            chunks.append(data[off : off + n])
            off += n
        if off != len(data):
            raise CorruptStreamError(f"{len(data) - off} trailing bytes")
        return cls(mhash, h, w, oh, ow, tuple(chunks), version)


def _pad_reflect(x, target_h, target_w):
    # F.pad reflect caps each pad at dim-1, so apply in rounds
    while x.shape[-2] < target_h or x.shape[-1] < target_w:
        ph = min(target_h - x.shape[-2], x.shape[-2] - 1)
        pw = min(target_w - x.shape[-1], x.shape[-1] - 1)
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x


def pad_pair(x_l, x_r, multiple=PAD_MULTIPLE):
    H, W = x_l.shape[-2:]
    th = -(-H // multiple) * multiple
    tw = -(-W // multiple) * multiple
    return _pad_reflect(x_l, th, tw), _pad_reflect(x_r, th, tw)


# bypass coding carries sign plus 31 magnitude bits; residuals past that
# (a diverged model, never a healthy one) are clamped so the stream stays
# decodable instead of silently desynchronizing
_SYMBOL_LIMIT = (1 << 31) - 1


def _quantize_chunk(v, mu):
    """Residual symbols (flat int64) and the dequantized tensor mu + k."""
    k = entropy.round_half_away(v - mu)
    if not torch.isfinite(k).all():
        raise NumericsError("non-finite latent residual")
    ks = k.flatten().to(torch.long).clamp_(-_SYMBOL_LIMIT, _SYMBOL_LIMIT)
    return ks, mu + ks.view(v.shape).to(mu.dtype)


def _encode_chunk(coder, bank, v, mu, b):
    ks, v_hat = _quantize_chunk(v, mu)
    data = coder.encode(ks.tolist(), bank.tables_for(b))
    return data, v_hat


def _decode_chunk(coder, bank, data, mu, b):
    cdfs = bank.tables_for(b)
    symbols = coder.decode(data, cdfs, len(cdfs))
    k = torch.tensor(symbols, dtype=mu.dtype, device=mu.device).view(mu.shape)
    return mu + k


def encode_stereo(pair_or_tensors, model, coder=None, stats=None):
    """Full encode to a BitstreamContainer. Accepts a StereoPair or a
    (x_l, x_r) tensor pair shaped (1,3,H,W) in [0,1]. When `stats` is a
    dict it receives per-phase wall times (io/forward/entropy seconds)."""
    coder = coder or ReferenceCoder()
    model.eval()
    t0 = time.perf_counter()
    x_l, x_r = _as_tensors(pair_or_tensors, model)
    _, _, oh, ow = x_l.shape
    x_l, x_r = pad_pair(x_l, x_r)
    _, _, H, W = x_l.shape
    bank = CdfBank()
    t_fwd = t_ent = 0.0
    with torch.no_grad():
        t1 = time.perf_counter()
        y_l, y_r = model.analysis(x_l, x_r)
        z_l, z_r = model.hyper_analysis(y_l, y_r)
        mu_zl, b_zl = model.theta_z_l(z_l)
        t_fwd += time.perf_counter() - t1

        t1 = time.perf_counter()
        c_zl, zh_l = _encode_chunk(coder, bank, z_l, mu_zl, b_zl)
        t_ent += time.perf_counter() - t1

        t1 = time.perf_counter()
        mu_zr, b_zr = model.theta_z_r(zh_l)
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        c_zr, zh_r = _encode_chunk(coder, bank, z_r, mu_zr, b_zr)
        t_ent += time.perf_counter() - t1

        t1 = time.perf_counter()
        (mu_l, b_l), right = model.theta_y(zh_l, zh_r)
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        c_yl, yh_l = _encode_chunk(coder, bank, y_l, mu_l, b_l)
        t_ent += time.perf_counter() - t1
        t1 = time.perf_counter()
        mu_r, b_r = right(yh_l) if callable(right) else right
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        c_yr, _ = _encode_chunk(coder, bank, y_r, mu_r, b_r)
        t_ent += time.perf_counter() - t1

    cont = BitstreamContainer(model_hash(model), H, W, oh, ow,
                              (c_zl, c_zr, c_yl, c_yr))
    if stats is not None:
        total = time.perf_counter() - t0
        stats.update(forward=t_fwd, entropy=t_ent,
                     io=total - t_fwd - t_ent, total=total)
    return cont


def decode_stereo(container, model, coder=None, stats=None):
    """Reconstruct (x_hat_l, x_hat_r) from a container, cropped to the
    original dimensions. Latent recovery is bit-exact by construction."""
    coder = coder or ReferenceCoder()
    model.eval()
    t0 = time.perf_counter()
    if container.model_hash != model_hash(model):
        raise ModelMismatchError("bitstream was produced by a different checkpoint")
    H, W = container.coded_h, container.coded_w
    hh, hw = H // 32, W // 32
    M = model.cfg.M
    bank = CdfBank()
    c_zl, c_zr, c_yl, c_yr = container.chunks
    t_fwd = t_ent = 0.0
    with torch.no_grad():
        t1 = time.perf_counter()
        shape_z = torch.zeros(1, M, hh, hw)
        mu_zl, b_zl = model.theta_z_l(shape_z)
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        zh_l = _decode_chunk(coder, bank, c_zl, mu_zl, b_zl)
        t_ent += time.perf_counter() - t1

        t1 = time.perf_counter()
        mu_zr, b_zr = model.theta_z_r(zh_l)
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        zh_r = _decode_chunk(coder, bank, c_zr, mu_zr, b_zr)
        t_ent += time.perf_counter() - t1

        t1 = time.perf_counter()
        (mu_l, b_l), right = model.theta_y(zh_l, zh_r)
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        yh_l = _decode_chunk(coder, bank, c_yl, mu_l, b_l)
        t_ent += time.perf_counter() - t1
        t1 = time.perf_counter()
        mu_r, b_r = right(yh_l) if callable(right) else right
        t_fwd += time.perf_counter() - t1
        t1 = time.perf_counter()
        yh_r = _decode_chunk(coder, bank, c_yr, mu_r, b_r)
        t_ent += time.perf_counter() - t1

        t1 = time.perf_counter()
        xh_l, xh_r = model.synthesis(yh_l, yh_r)
        t_fwd += time.perf_counter() - t1
    oh, ow = container.orig_h, container.orig_w
    out = xh_l[..., :oh, :ow], xh_r[..., :oh, :ow]
    if stats is not None:
        total = time.perf_counter() - t0
        stats.update(forward=t_fwd, entropy=t_ent,
                     io=total - t_fwd - t_ent, total=total)
    return out


def _chunk_bits(bank, ks, b):
    # ideal code length under the exact tables the range coder consults;
    # out-of-range residuals pay the escape span plus 32 raw bits
    bits = 0.0
    for sym, cdf in zip(ks.tolist(), bank.tables_for(b)):
        idx = cdf.index_of(sym)
        lo, hi = cdf.span(idx)
        bits += cdf.precision - math.log2(hi - lo)
        if idx == cdf.symbol_hi - cdf.symbol_lo + 1:
            bits += 32.0
    return bits


def estimate_container_bits(pair_or_tensors, model):
    """Expected length of the entropy-coded payload, in bits, costing each
    residual against the same shared CDF tables the range coder uses
    (header, chunk prefixes, and coder flush bytes excluded)."""
    model.eval()
    x_l, x_r = _as_tensors(pair_or_tensors, model)
    x_l, x_r = pad_pair(x_l, x_r)
    bank = CdfBank()
    with torch.no_grad():
        y_l, y_r = model.analysis(x_l, x_r)
        z_l, z_r = model.hyper_analysis(y_l, y_r)
        mu, b = model.theta_z_l(z_l)
        ks, zh_l = _quantize_chunk(z_l, mu)
        bits = _chunk_bits(bank, ks, b)
        mu, b = model.theta_z_r(zh_l)
        ks, zh_r = _quantize_chunk(z_r, mu)
        bits += _chunk_bits(bank, ks, b)
        (mu_l, b_l), right = model.theta_y(zh_l, zh_r)
        ks, yh_l = _quantize_chunk(y_l, mu_l)
        bits += _chunk_bits(bank, ks, b_l)
        mu_r, b_r = right(yh_l) if callable(right) else right
        ks, _ = _quantize_chunk(y_r, mu_r)
        bits += _chunk_bits(bank, ks, b_r)
    return bits


def _as_tensors(pair_or_tensors, model):
    if isinstance(pair_or_tensors, tuple):
        x_l, x_r = pair_or_tensors
    else:
        p = pair_or_tensors
        dev = next(model.parameters()).device
        x_l = torch.from_numpy(p.left).unsqueeze(0).to(dev)
        x_r = torch.from_numpy(p.right).unsqueeze(0).to(dev)
    return x_l, x_r
