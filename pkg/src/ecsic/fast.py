"""ctypes bridge to the optional Rust range coder.

Importing this module loads the fast_coder shared library and verifies its
ABI tag; both failures surface as OSError so get_coder can fall back to the
reference coder. Streams are byte-identical to coder.ac_encode by
construction, enforced by the differential fuzz suite under fast_coder/tests.

The library is found through the ECSIC_FAST_CODER environment variable, or
at the crate's default cargo output path next to this source tree.
"""

import ctypes
import os
from array import array
from pathlib import Path

from . import entropy
from .errors import CorruptStreamError

ABI = "fastcoder/1"
ENV_VAR = "ECSIC_FAST_CODER"

_OK = 0
_CORRUPT = 1
_INVALID = 2
_BYPASS_RANGE = 3


def _library_path() -> Path:
    override = os.environ.get(ENV_VAR)
    if override:
        return Path(override)
    root = Path(__file__).resolve().parents[2]
    return root / "fast_coder" / "target" / "release" / "libfast_coder.so"


_loaded = {}


def _load(path: Path):
    lib = _loaded.get(path)
    if lib is not None:
        return lib
    if not path.is_file():
        raise OSError(f"fast coder library not found at {path}")
    lib = ctypes.CDLL(str(path))

    lib.fc_abi.argtypes = []
    lib.fc_abi.restype = ctypes.c_char_p
    lib.fc_encode.argtypes = [
        ctypes.c_void_p, ctypes.c_size_t,  # symbols, nsym
        ctypes.c_void_p, ctypes.c_size_t,  # blob, blob_words
        ctypes.POINTER(ctypes.c_void_p),
        ctypes.POINTER(ctypes.c_size_t),
        ctypes.POINTER(ctypes.c_size_t),
    ]
    lib.fc_encode.restype = ctypes.c_int32
    lib.fc_decode.argtypes = [
        ctypes.c_void_p, ctypes.c_size_t,  # stream, stream_len
        ctypes.c_void_p, ctypes.c_size_t,  # blob, blob_words
        ctypes.c_size_t, ctypes.c_void_p,  # nsym, out_symbols
    ]
    lib.fc_decode.restype = ctypes.c_int32
    lib.fc_build_cdf.argtypes = [
        ctypes.c_double, ctypes.c_uint32, ctypes.c_uint32,
        ctypes.POINTER(ctypes.c_void_p),
        ctypes.POINTER(ctypes.c_size_t),
        ctypes.POINTER(ctypes.c_size_t),
    ]
    lib.fc_build_cdf.restype = ctypes.c_int32
    lib.fc_free_bytes.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t]
    lib.fc_free_bytes.restype = None
    lib.fc_free_words.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t]
    lib.fc_free_words.restype = None

    tag = lib.fc_abi()
    got = tag.decode("ascii", "replace") if tag else "<none>"
    if got != ABI:
        raise OSError(f"fast coder ABI mismatch: library reports {got!r}, need {ABI!r}")
    _loaded[path] = lib
    return lib


def _build_blob(table_list, indices) -> array:
    """Pack CDF tables plus per-symbol table indices into the u32 wire blob.

    Layout in u32 words: [T], T x [precision, lo, hi, flags, cum_len, cum...],
    [N], N x table index. lo/hi ride as two's-complement i32 bit patterns.
    """
    words = array("I", [len(table_list)])
    for cdf in table_list:
        words.append(cdf.precision)
        words.append(cdf.symbol_lo & 0xFFFFFFFF)
        words.append(cdf.symbol_hi & 0xFFFFFFFF)
        words.append(1 if cdf.has_bypass_tail else 0)
        words.append(len(cdf.cumulative))
        words.extend(cdf.cumulative)
    words.append(len(indices))
    words.extend(indices)
    return words


def _dedup(cdfs):
    # entries of cdfs repeat the same table objects; ship each table once
    table_at = {}
    tables = []
    indices = array("I")
    for cdf in cdfs:
        pos = table_at.get(id(cdf))
        if pos is None:
            pos = len(tables)
            table_at[id(cdf)] = pos
            tables.append(cdf)
        indices.append(pos)
    return tables, indices


def _addr(buf) -> int:
    # array.buffer_info() gives (0, 0) for an empty array; the library
    # accepts a null data pointer whenever the length is zero
    return buf.buffer_info()[0]


class FastCoder:
    """Entropy-coding backend running the range coder in native code."""

    name = "fast"

    def __init__(self, path=None):
        self._lib = _load(Path(path) if path is not None else _library_path())

    def encode(self, symbols, cdfs) -> bytes:
        if len(symbols) != len(cdfs):
            raise ValueError("one CDF per symbol required")
        try:
            sym = array("q", [int(k) for k in symbols])
        except OverflowError:
            # past i64: the reference rejects anything outside 32-bit bypass
            raise ValueError("residual outside the 32-bit bypass range") from None
        blob = _build_blob(*_dedup(cdfs))
        out_ptr = ctypes.c_void_p()
        out_len = ctypes.c_size_t()
        out_cap = ctypes.c_size_t()
        status = self._lib.fc_encode(
            _addr(sym), len(sym), _addr(blob), len(blob),
            ctypes.byref(out_ptr), ctypes.byref(out_len), ctypes.byref(out_cap))
        if status != _OK:
            raise _error(status, "encode")
        try:
            return ctypes.string_at(out_ptr.value, out_len.value)
        finally:
            self._lib.fc_free_bytes(out_ptr, out_len, out_cap)

    def decode(self, data: bytes, cdfs, n: int):
        per_symbol = [cdfs[i] for i in range(n)]
        blob = _build_blob(*_dedup(per_symbol))
        out = array("q", bytes(8 * n))
        status = self._lib.fc_decode(
            data, len(data), _addr(blob), len(blob), n, _addr(out))
        if status != _OK:
            raise _error(status, "decode")
        return out.tolist()


def _error(status: int, op: str) -> Exception:
    if status == _CORRUPT:
        return CorruptStreamError("bitstream truncated")
    if status == _BYPASS_RANGE:
        return ValueError("residual outside the 32-bit bypass range")
    return ValueError(f"fast coder rejected the {op} call (status {status})")


def fast_build_cdf(b: float, precision: int = entropy.PRECISION,
                   max_abs_symbol: int = entropy.MAX_ABS_SYMBOL,
                   path=None) -> entropy.QuantizedCDF:
    """Build a quantized CDF in native code; parity helper for the test

    suite, returning the same QuantizedCDF type as entropy.build_cdf."""
    lib = _load(Path(path) if path is not None else _library_path())
    out_ptr = ctypes.c_void_p()
    out_len = ctypes.c_size_t()
    out_cap = ctypes.c_size_t()
    status = lib.fc_build_cdf(
        float(b), precision, max_abs_symbol,
        ctypes.byref(out_ptr), ctypes.byref(out_len), ctypes.byref(out_cap))
    if status != _OK:
        raise ValueError(f"fast coder rejected the table build (status {status})")
    try:
        n = out_len.value
        words = array("I", ctypes.string_at(out_ptr.value, 4 * n))
    finally:
        lib.fc_free_words(out_ptr, out_len, out_cap)
    if n < 5 or n != 5 + words[4]:
        raise ValueError("malformed table words from the fast coder")

    def to_i32(u):
        return u - 0x100000000 if u >= 0x80000000 else u

    return entropy.QuantizedCDF(
        precision=int(words[0]),
        symbol_lo=to_i32(words[1]),
        symbol_hi=to_i32(words[2]),
        cumulative=list(words[5:]),
        has_bypass_tail=bool(words[3] & 1),
    )
