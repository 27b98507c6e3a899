//! High-throughput range coder, byte-identical to the ecsic reference coder.
//!
//! Differential equivalence with the reference implementation is the sole
//! correctness definition: every table entry and every emitted byte must
//! match it exactly. Two mirroring subtleties are load-bearing:
//!
//! * The reference keeps the encoder/decoder `low` register unmasked
//!   between renormalizations (arbitrary-precision integers) and masks to
//!   32 bits only when bytes move. `low` never exceeds a few bits past
//!   2^32 (each coding step adds less than the concurrent range shrink),
//!   so a u64 with masks in exactly the reference's positions reproduces
//!   it bit for bit.
//! * CDF construction is scalar C-library double math (`exp`, `expm1`);
//!   this crate calls the same libm symbols rather than any reimplementation
//!   so both sides round identically on the last bit.
//!
//! The FFI surface passes symbols and CDF tables as flat integer buffers.
//! See `parse_blob` for the layout contract shared with the Python bridge.

use std::os::raw::c_char;

const TOP: u64 = 1 << 24;
const BOTTOM: u64 = 1 << 16;
const MASK: u64 = 0xFFFF_FFFF;

const B_MIN: f64 = 1e-3;

/// Bumped on any change to the FFI signatures or the blob layout.
pub const ABI: &str = "fastcoder/1";
static ABI_CSTR: &[u8] = b"fastcoder/1\0";

pub const STATUS_OK: i32 = 0;
pub const STATUS_CORRUPT: i32 = 1;
pub const STATUS_INVALID: i32 = 2;
pub const STATUS_BYPASS_RANGE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoderError {
    /// Truncated stream, or stream/table disagreement while decoding.
    Corrupt,
    /// Malformed blob or arguments outside the mirrored domain.
    Invalid,
    /// |symbol| exceeds the 32-bit bypass range.
    BypassRange,
}

impl CoderError {
    fn status(self) -> i32 {
        match self {
            CoderError::Corrupt => STATUS_CORRUPT,
            CoderError::Invalid => STATUS_INVALID,
            CoderError::BypassRange => STATUS_BYPASS_RANGE,
        }
    }
}

// ---------------------------------------------------------------------------
// Discrete Laplace pmf and quantized CDF tables.
// ---------------------------------------------------------------------------

extern "C" {
    fn exp(x: f64) -> f64;
    fn expm1(x: f64) -> f64;
}

/// P(round(v) == k) for v ~ Laplace(0, b): closed forms that keep full
/// double precision near k = 0, evaluated with the platform libm.
pub fn laplace_discrete_pmf(k: i64, b: f64) -> f64 {
    unsafe {
        if k == 0 {
            -expm1(-0.5 / b)
        } else {
            let a = k.unsigned_abs() as f64;
            -0.5 * exp(-(a - 0.5) / b) * expm1(-1.0 / b)
        }
    }
}

/// Frequency table over symbols [symbol_lo .. symbol_hi] plus an optional
/// escape routing out-of-range residuals to fixed-length bypass coding.
/// cumulative[i] is the mass below the i-th coding index; the last entry
/// is exactly 2^precision.
#[derive(Debug, Clone)]
pub struct CdfTable {
    pub precision: u32,
    pub symbol_lo: i32,
    pub symbol_hi: i32,
    pub has_bypass_tail: bool,
    pub cumulative: Vec<u32>,
}

impl CdfTable {
    fn core_count(&self) -> i64 {
        self.symbol_hi as i64 - self.symbol_lo as i64 + 1
    }
}

fn core_radius(b: f64, precision: u32, max_abs_symbol: u32) -> i32 {
    // largest k whose pmf still earns at least one count; 0 always stays
    let scale = (1u64 << precision) as f64;
    let mut hi = 0i32;
    for k in 1..=max_abs_symbol as i64 {
        if laplace_discrete_pmf(k, b) * scale >= 1.0 {
            hi = k as i32;
        } else {
            break;
        }
    }
    hi
}

/// Quantize the Laplace pmf to integer frequencies summing to 2^precision,
/// with the largest-remainder settlement rule: floor with a minimum of 1,
/// surplus +1 to the largest fractional remainders (ties: lower index
/// first, cycling), deficit -1 from the largest frequency still >= 2
/// (ties: lower index first).
pub fn build_cdf(b: f64, precision: u32, max_abs_symbol: u32) -> Result<CdfTable, CoderError> {
    if !(8..=24).contains(&precision) || b.is_nan() {
        return Err(CoderError::Invalid);
    }
    let b = if b < B_MIN { B_MIN } else { b };

    let total = 1i64 << precision;
    let radius = core_radius(b, precision, max_abs_symbol);

    let mut targets: Vec<f64> = (-radius as i64..=radius as i64)
        .map(|k| laplace_discrete_pmf(k, b) * total as f64)
        .collect();
    let mut core_mass = 0.0f64; // plain left-to-right sum, like the reference
    for k in -radius as i64..=radius as i64 {
        core_mass += laplace_discrete_pmf(k, b);
    }
    let leftover = 1.0 - core_mass;
    targets.push(if leftover > 0.0 { leftover } else { 0.0 } * total as f64);

    let mut freqs: Vec<i64> = targets
        .iter()
        .map(|&t| {
            let f = t.floor() as i64;
            if f < 1 {
                1
            } else {
                f
            }
        })
        .collect();
    let mut deficit = total - freqs.iter().sum::<i64>();

    if deficit > 0 {
        let fracs: Vec<f64> = targets.iter().map(|&t| t - t.floor()).collect();
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by(|&i, &j| fracs[j].partial_cmp(&fracs[i]).unwrap().then(i.cmp(&j)));
        let mut pos = 0usize;
        while deficit > 0 {
            freqs[order[pos % order.len()]] += 1;
            deficit -= 1;
            pos += 1;
        }
    }
    while deficit < 0 {
        let mut best: Option<usize> = None;
        for (i, &f) in freqs.iter().enumerate() {
            if f >= 2 && best.map_or(true, |b| f > freqs[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(i) => freqs[i] -= 1,
            None => return Err(CoderError::Invalid),
        }
        deficit += 1;
    }

    let mut cumulative = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0i64;
    cumulative.push(0u32);
    for &f in &freqs {
        acc += f;
        cumulative.push(acc as u32);
    }
    if acc != total {
        return Err(CoderError::Invalid);
    }
    Ok(CdfTable {
        precision,
        symbol_lo: -radius,
        symbol_hi: radius,
        has_bypass_tail: true,
        cumulative,
    })
}

// ---------------------------------------------------------------------------
// 32-bit carry-less range coder (Subbotin style).
// ---------------------------------------------------------------------------

struct RangeEncoder {
    low: u64, // unmasked between renormalizations, like the reference
    range: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: MASK,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, cum: u64, freq: u64, precision: u32) {
        let r = self.range >> precision;
        self.low += r * cum;
        self.range = r * freq;
        loop {
            if (self.low ^ (self.low + self.range)) < TOP {
                // top byte settled
            } else if self.range < BOTTOM {
                // carry-less underflow: clip range to the next 2^16 boundary
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            } else {
                break;
            }
            self.out.push(((self.low >> 24) & 0xFF) as u8);
            self.low = (self.low << 8) & MASK;
            self.range = (self.range << 8) & MASK;
        }
    }

    fn encode_raw16(&mut self, value: u64) {
        self.encode(value, 1, 16);
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push(((self.low >> 24) & 0xFF) as u8);
            self.low = (self.low << 8) & MASK;
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    stream: &'a [u8],
    pos: usize,
    low: u64,
    range: u64,
    code: u64,
}

impl<'a> RangeDecoder<'a> {
    fn new(stream: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder {
            stream,
            pos: 0,
            low: 0,
            range: MASK,
            code: 0,
        };
        for _ in 0..4 {
            dec.code = ((dec.code << 8) | dec.next_byte()?) & MASK;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u64, CoderError> {
        match self.stream.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b as u64)
            }
            None => Err(CoderError::Corrupt),
        }
    }

    fn target(&self, precision: u32) -> Result<i64, CoderError> {
        let r = self.range >> precision;
        if r == 0 {
            return Err(CoderError::Invalid);
        }
        // code is masked but low is not, so the difference can go negative
        // on corrupt input; floor division matches the reference.
        let t = (self.code as i64 - self.low as i64).div_euclid(r as i64);
        let hi = (1i64 << precision) - 1;
        Ok(if t < hi { t } else { hi })
    }

    fn advance(&mut self, cum: u64, freq: u64, precision: u32) -> Result<(), CoderError> {
        let r = self.range >> precision;
        self.low += r * cum;
        self.range = r * freq;
        loop {
            if (self.low ^ (self.low + self.range)) < TOP {
            } else if self.range < BOTTOM {
                self.range = self.low.wrapping_neg() & (BOTTOM - 1);
            } else {
                break;
            }
            self.code = ((self.code << 8) | self.next_byte()?) & MASK;
            self.low = (self.low << 8) & MASK;
            self.range = (self.range << 8) & MASK;
        }
        Ok(())
    }

    fn decode_raw16(&mut self) -> Result<i64, CoderError> {
        let v = self.target(16)?;
        // v is in [0, 2^16) on any stream this decoder accepts, because a
        // negative target is rejected as corrupt by the symbol path and
        // here it would mean the same desync.
        if v < 0 {
            return Err(CoderError::Corrupt);
        }
        self.advance(v as u64, 1, 16)?;
        Ok(v)
    }
}

fn encode_bypass(enc: &mut RangeEncoder, k: i64) -> Result<(), CoderError> {
    let mag = k.unsigned_abs();
    if mag > 0x7FFF_FFFF {
        return Err(CoderError::BypassRange);
    }
    let value = (if k < 0 { 1u64 << 31 } else { 0 }) | mag;
    enc.encode_raw16(value >> 16);
    enc.encode_raw16(value & 0xFFFF);
    Ok(())
}

fn decode_bypass(dec: &mut RangeDecoder) -> Result<i64, CoderError> {
    let value = (dec.decode_raw16()? << 16) | dec.decode_raw16()?;
    let mag = value & 0x7FFF_FFFF;
    Ok(if value >> 31 != 0 { -mag } else { mag })
}

// ---------------------------------------------------------------------------
// Stream-level encode/decode against per-symbol tables.
// ---------------------------------------------------------------------------

/// Encode symbols[i] against tables[table_idx[i]]. Byte-identical to the
/// reference for every input in its domain; the empty input encodes to the
/// bare 4-byte flush.
pub fn ac_encode(
    symbols: &[i64],
    tables: &[CdfTable],
    table_idx: &[u32],
) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != table_idx.len() {
        return Err(CoderError::Invalid);
    }
    let mut enc = RangeEncoder::new();
    for (pos, &k) in symbols.iter().enumerate() {
        let cdf = tables
            .get(table_idx[pos] as usize)
            .ok_or(CoderError::Invalid)?;
        if cdf.precision > 24 {
            return Err(CoderError::Invalid);
        }
        let core = cdf.core_count();
        let idx = if cdf.symbol_lo as i64 <= k && k <= cdf.symbol_hi as i64 {
            (k - cdf.symbol_lo as i64) as usize
        } else {
            core as usize
        };
        let lo = *cdf.cumulative.get(idx).ok_or(CoderError::Invalid)? as u64;
        let hi = *cdf.cumulative.get(idx + 1).ok_or(CoderError::Invalid)? as u64;
        if hi <= lo {
            return Err(CoderError::Invalid);
        }
        enc.encode(lo, hi - lo, cdf.precision);
        if idx as i64 == core {
            encode_bypass(&mut enc, k)?;
        }
    }
    Ok(enc.finish())
}

// first index whose cumulative entry exceeds t (bisect_right)
fn upper_bound(cumulative: &[u32], t: i64) -> usize {
    let mut lo = 0usize;
    let mut hi = cumulative.len();
    while lo < hi {
        let mid = (lo + hi) / 2;
        if (cumulative[mid] as i64) <= t {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Recover n symbols, symbol i decoded against tables[table_idx[i]].
pub fn ac_decode(
    stream: &[u8],
    tables: &[CdfTable],
    table_idx: &[u32],
    n: usize,
) -> Result<Vec<i64>, CoderError> {
    if table_idx.len() != n {
        return Err(CoderError::Invalid);
    }
    let mut dec = RangeDecoder::new(stream)?;
    let mut out = Vec::with_capacity(n);
    for pos in 0..n {
        let cdf = tables
            .get(table_idx[pos] as usize)
            .ok_or(CoderError::Invalid)?;
        if cdf.precision > 24 || cdf.cumulative.len() < 2 {
            return Err(CoderError::Invalid);
        }
        let t = dec.target(cdf.precision)?;
        let ub = upper_bound(&cdf.cumulative, t);
        if ub == 0 {
            return Err(CoderError::Corrupt); // negative target: desynced stream
        }
        let idx = ub - 1;
        let lo = cdf.cumulative[idx] as u64;
        let hi = *cdf.cumulative.get(idx + 1).ok_or(CoderError::Corrupt)? as u64;
        if hi <= lo {
            return Err(CoderError::Corrupt);
        }
        dec.advance(lo, hi - lo, cdf.precision)?;
        if cdf.has_bypass_tail && idx as i64 == cdf.core_count() {
            out.push(decode_bypass(&mut dec)?);
        } else {
            out.push(cdf.symbol_lo as i64 + idx as i64);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// FFI surface. All buffers are caller-owned except the outputs returned
// through (ptr, len, cap) triples, which must be released with the matching
// fc_free_* call. No shared mutable state anywhere, so every entry point is
// safe to call concurrently.
// ---------------------------------------------------------------------------

/// Blob layout (u32 words, native endianness on both sides of the FFI):
///   [0]               table count T
///   per table:        precision, symbol_lo (i32 bits), symbol_hi (i32 bits),
///                     flags (bit0 = has_bypass_tail), cum_len, cum[0..cum_len]
///   then:             index count N, table index per symbol (N words)
fn parse_blob(words: &[u32]) -> Result<(Vec<CdfTable>, &[u32]), CoderError> {
    let mut c = 0usize;
    let t = *words.first().ok_or(CoderError::Invalid)? as usize;
    c += 1;
    let mut tables = Vec::with_capacity(t);
    for _ in 0..t {
        if c + 5 > words.len() {
            return Err(CoderError::Invalid);
        }
        let precision = words[c];
        let symbol_lo = words[c + 1] as i32;
        let symbol_hi = words[c + 2] as i32;
        let flags = words[c + 3];
        let cum_len = words[c + 4] as usize;
        c += 5;
        if symbol_hi < symbol_lo || c + cum_len > words.len() {
            return Err(CoderError::Invalid);
        }
        let has_bypass_tail = flags & 1 != 0;
        let expected =
            (symbol_hi as i64 - symbol_lo as i64 + 1 + has_bypass_tail as i64 + 1) as usize;
        if cum_len != expected {
            return Err(CoderError::Invalid);
        }
        tables.push(CdfTable {
            precision,
            symbol_lo,
            symbol_hi,
            has_bypass_tail,
            cumulative: words[c..c + cum_len].to_vec(),
        });
        c += cum_len;
    }
    if c >= words.len() {
        return Err(CoderError::Invalid);
    }
    let n = words[c] as usize;
    c += 1;
    if c + n != words.len() {
        return Err(CoderError::Invalid);
    }
    Ok((tables, &words[c..]))
}

fn vec_into_raw<T>(mut v: Vec<T>, out_ptr: *mut *mut T, out_len: *mut usize, out_cap: *mut usize) {
    unsafe {
        *out_ptr = v.as_mut_ptr();
        *out_len = v.len();
        *out_cap = v.capacity();
    }
    std::mem::forget(v);
}

/// Version handshake; the bridge refuses to load on a mismatch.
#[no_mangle]
pub extern "C" fn fc_abi() -> *const c_char {
    ABI_CSTR.as_ptr() as *const c_char
}

/// Encode nsym symbols against the blob's tables. On STATUS_OK the stream
/// is returned through (out_ptr, out_len, out_cap); release with
/// fc_free_bytes.
///
/// # Safety
/// symbols must point to nsym readable i64s, blob to blob_words readable
/// u32s, and the three out pointers to writable words.
#[no_mangle]
pub unsafe extern "C" fn fc_encode(
    symbols: *const i64,
    nsym: usize,
    blob: *const u32,
    blob_words: usize,
    out_ptr: *mut *mut u8,
    out_len: *mut usize,
    out_cap: *mut usize,
) -> i32 {
    if (symbols.is_null() && nsym > 0)
        || blob.is_null()
        || out_ptr.is_null()
        || out_len.is_null()
        || out_cap.is_null()
    {
        return STATUS_INVALID;
    }
    let symbols = if nsym == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(symbols, nsym)
    };
    let words = std::slice::from_raw_parts(blob, blob_words);
    let (tables, idx) = match parse_blob(words) {
        Ok(p) => p,
        Err(e) => return e.status(),
    };
    match ac_encode(symbols, &tables, idx) {
        Ok(stream) => {
            vec_into_raw(stream, out_ptr, out_len, out_cap);
            STATUS_OK
        }
        Err(e) => e.status(),
    }
}

/// Decode nsym symbols from the stream into out_symbols (caller-allocated,
/// nsym i64s).
///
/// # Safety
/// stream must point to stream_len readable bytes, blob to blob_words
/// readable u32s, out_symbols to nsym writable i64s.
#[no_mangle]
pub unsafe extern "C" fn fc_decode(
    stream: *const u8,
    stream_len: usize,
    blob: *const u32,
    blob_words: usize,
    nsym: usize,
    out_symbols: *mut i64,
) -> i32 {
    if (stream.is_null() && stream_len > 0) || blob.is_null() || (out_symbols.is_null() && nsym > 0)
    {
        return STATUS_INVALID;
    }
    let stream = if stream_len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(stream, stream_len)
    };
    let words = std::slice::from_raw_parts(blob, blob_words);
    let (tables, idx) = match parse_blob(words) {
        Ok(p) => p,
        Err(e) => return e.status(),
    };
    match ac_decode(stream, &tables, idx, nsym) {
        Ok(symbols) => {
            if nsym > 0 {
                std::ptr::copy_nonoverlapping(symbols.as_ptr(), out_symbols, nsym);
            }
            STATUS_OK
        }
        Err(e) => e.status(),
    }
}

/// Build one quantized CDF table; the result uses the same per-table word
/// layout as the blob (precision, lo, hi, flags, cum_len, cum...). Release
/// with fc_free_words.
///
/// # Safety
/// The three out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fc_build_cdf(
    b: f64,
    precision: u32,
    max_abs_symbol: u32,
    out_ptr: *mut *mut u32,
    out_len: *mut usize,
    out_cap: *mut usize,
) -> i32 {
    if out_ptr.is_null() || out_len.is_null() || out_cap.is_null() {
        return STATUS_INVALID;
    }
    match build_cdf(b, precision, max_abs_symbol) {
        Ok(t) => {
            let mut words = Vec::with_capacity(5 + t.cumulative.len());
            words.push(t.precision);
            words.push(t.symbol_lo as u32);
            words.push(t.symbol_hi as u32);
            words.push(t.has_bypass_tail as u32);
            words.push(t.cumulative.len() as u32);
            words.extend_from_slice(&t.cumulative);
            vec_into_raw(words, out_ptr, out_len, out_cap);
            STATUS_OK
        }
        Err(e) => e.status(),
    }
}

/// # Safety
/// (ptr, len, cap) must come from exactly one fc_encode result.
#[no_mangle]
pub unsafe extern "C" fn fc_free_bytes(ptr: *mut u8, len: usize, cap: usize) {
    if !ptr.is_null() {
        drop(Vec::from_raw_parts(ptr, len, cap));
    }
}

/// # Safety
/// (ptr, len, cap) must come from exactly one fc_build_cdf result.
#[no_mangle]
pub unsafe extern "C" fn fc_free_words(ptr: *mut u32, len: usize, cap: usize) {
    if !ptr.is_null() {
        drop(Vec::from_raw_parts(ptr, len, cap));
    }
}

// ---------------------------------------------------------------------------
