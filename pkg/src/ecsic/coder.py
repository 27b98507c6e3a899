"""Reference range coder.

A 32-bit carry-less range coder (Subbotin style): renormalization emits the
top byte either when it can no longer change or when the range underflows
16 bits, in which case the range is clipped against the next 2^16 boundary
instead of propagating a carry. Everything after CDF construction is integer
arithmetic, so streams are identical across platforms and languages.

The decoder consumes bytes in lockstep with the encoder's emissions (plus the
4-byte flush), so a truncated stream always runs out of bytes before the last
symbol finishes and is reported rather than silently mis-decoded.

Out-of-range residuals are coded as an escape symbol followed by the value in
raw sign-magnitude 32 bits (two 16-bit uniform slices), covering any symbol
with |k| <= 2^31 - 1.
"""

from bisect import bisect_right

from .errors import CorruptStreamError

TOP = 1 << 24
BOTTOM = 1 << 16
MASK = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, precision: int):
        r = self.range >> precision
        self.low += r * cum
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOTTOM:
                # carry-less underflow: clip range to the next 2^16 boundary
                self.range = (-self.low) & (BOTTOM - 1)
            else:
                break
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def encode_raw16(self, value: int):
        # 16 uniform bits; same arithmetic as a symbol with freq 1 at tot 2^16
        self.encode(value, 1, 16)

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, stream: bytes):
        self.stream = stream
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._next_byte()) & MASK

    def _next_byte(self) -> int:
        if self.pos >= len(self.stream):
            raise CorruptStreamError("bitstream truncated")
        b = self.stream[self.pos]
        self.pos += 1
        return b

    def target(self, precision: int) -> int:
        r = self.range >> precision
        t = (self.code - self.low) // r
        hi = (1 << precision) - 1
        return t if t < hi else hi

    def advance(self, cum: int, freq: int, precision: int):
        r = self.range >> precision
        self.low += r * cum
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOTTOM:
                self.range = (-self.low) & (BOTTOM - 1)
            else:
                break
            self.code = ((self.code << 8) | self._next_byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def decode_raw16(self) -> int:
        v = self.target(16)
        self.advance(v, 1, 16)
        return v


def _encode_bypass(enc, k: int):
    mag = -k if k < 0 else k
    if mag > 0x7FFFFFFF:
        raise ValueError(f"residual {k} outside the 32-bit bypass range")
    value = ((1 << 31) if k < 0 else 0) | mag
    enc.encode_raw16(value >> 16)
    enc.encode_raw16(value & 0xFFFF)


def _decode_bypass(dec) -> int:
    value = (dec.decode_raw16() << 16) | dec.decode_raw16()
    mag = value & 0x7FFFFFFF
    return -mag if value >> 31 else mag


def ac_encode(symbols, cdfs) -> bytes:
    """Encode integer symbols against per-symbol QuantizedCDF tables.

    len(symbols) must equal len(cdfs); entries of cdfs may repeat the same
    table object. The empty sequence encodes to the bare 4-byte flush.
    """
    if len(symbols) != len(cdfs):
        raise ValueError("one CDF per symbol required")
    enc = RangeEncoder()
    for k, cdf in zip(symbols, cdfs):
        idx = cdf.index_of(int(k))
        lo, hi = cdf.span(idx)
        enc.encode(lo, hi - lo, cdf.precision)
        if idx == cdf.symbol_hi - cdf.symbol_lo + 1:
            _encode_bypass(enc, int(k))
    return enc.finish()


def ac_decode(stream: bytes, cdfs, n: int):
    """Recover n symbols; raises CorruptStreamError on truncated input."""
    dec = RangeDecoder(stream)
    out = []
    for i in range(n):
        cdf = cdfs[i]
        t = dec.target(cdf.precision)
        idx = bisect_right(cdf.cumulative, t) - 1
        lo, hi = cdf.span(idx)
        dec.advance(lo, hi - lo, cdf.precision)
        if cdf.has_bypass_tail and idx == cdf.symbol_hi - cdf.symbol_lo + 1:
            out.append(_decode_bypass(dec))
        else:
            out.append(cdf.symbol_lo + idx)
    return out
