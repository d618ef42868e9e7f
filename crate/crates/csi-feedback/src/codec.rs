//! Lossless coding of quantized feedback vectors with a 64-bit-state range
//! coder driven by the learned Gaussian entropy model.
//!
//! Frequencies use 16-bit resolution. Every dimension gets an integer
//! support `[-S_i, S_i]` wide enough that the tail mass is below 2⁻¹⁶, plus
//! an escape symbol that carries out-of-support values as raw 32-bit
//! payloads. The stream format (header + byte-aligned payload,
//! little-endian) is the bit-exact interchange contract.

use crate::encoder::bin_probability;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FREQ_BITS: u32 = 16;
const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const RANGE_TOP: u32 = 1 << 24;
const TAIL_THRESHOLD: f64 = 1.0 / 65536.0;
/// Cap on the one-sided support so symbol counts stay far below the
/// frequency total; the escape path covers anything beyond.
const MAX_SUPPORT: i64 = 16_384;

pub const BITSTREAM_VERSION: u16 = 1;

fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Per-dimension quantized frequencies over `[-S, S]` plus escape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    pub n_b: usize,
    /// One-sided support S_i per dimension.
    pub supports: Vec<i64>,
    /// Cumulative frequencies per dimension; `cum[d]` has
    /// `2·S_d + 3` entries ending at 2¹⁶ (last regular slot is escape).
    cums: Vec<Vec<u32>>,
}

impl SymbolTable {
    fn symbol_count(support: i64) -> usize {
        (2 * support + 2) as usize
    }

    fn escape_index(&self, dim: usize) -> usize {
        Self::symbol_count(self.supports[dim]) - 1
    }

    fn index_of(&self, dim: usize, value: i64) -> Option<usize> {
        let s = self.supports[dim];
        if (-s..=s).contains(&value) {
            Some((value + s) as usize)
        } else {
            None
        }
    }

    fn freq(&self, dim: usize, idx: usize) -> u32 {
        self.cums[dim][idx + 1] - self.cums[dim][idx]
    }

    fn cum(&self, dim: usize, idx: usize) -> u32 {
        self.cums[dim][idx]
    }

    /// Model probability of coding `value` in dimension `dim`, including the
    /// 32 raw bits spent after an escape.
    pub fn probability(&self, dim: usize, value: i64) -> f64 {
        let total = (1u64 << FREQ_BITS) as f64;
        match self.index_of(dim, value) {
            Some(idx) => self.freq(dim, idx) as f64 / total,
            None => {
                let esc = self.freq(dim, self.escape_index(dim)) as f64 / total;
                esc / (1u64 << 32) as f64
            }
        }
    }

    /// Value whose cumulative bucket contains `u ∈ [0, 2¹⁶)`; `None` marks
    /// the escape symbol.
    pub fn sample_value(&self, dim: usize, u: u32) -> Option<i64> {
        let idx = self.lookup(dim, u);
        if idx == self.escape_index(dim) {
            None
        } else {
            Some(idx as i64 - self.supports[dim])
        }
    }

    /// Symbol index whose cumulative range contains `value`.
    fn lookup(&self, dim: usize, value: u32) -> usize {
        let cums = &self.cums[dim];
        // last index i with cums[i] <= value
        match cums.binary_search(&value) {
            Ok(mut i) => {
                while i + 1 < cums.len() && cums[i + 1] == value {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }
}

/// Smallest one-sided support with Gaussian tail mass below 2⁻¹⁶.
pub fn support_for_scale(sigma: f64) -> i64 {
    let mut s: i64 = 0;
    loop {
        let tail = 2.0 * crate::autodiff::normal_cdf(-((s as f64) + 0.5) / sigma);
        if tail < TAIL_THRESHOLD || s >= MAX_SUPPORT {
            return s;
        }
        s += 1;
    }
}

/// Discretize the entropy model into 16-bit frequency tables. Deterministic:
/// the same scales always produce the identical table.
pub fn build_symbol_table(scales: &[f64]) -> SymbolTable {
    let mut supports = Vec::with_capacity(scales.len());
    let mut cums = Vec::with_capacity(scales.len());
    for &sigma in scales {
        let s = support_for_scale(sigma);
        supports.push(s);
        let mut probs: Vec<f64> = (-s..=s)
            .map(|v| bin_probability(v as f64, sigma))
            .collect();
        let in_support: f64 = probs.iter().sum();
        probs.push((1.0 - in_support).max(1e-12)); // escape mass
        cums.push(quantize_frequencies(&probs));
    }
    SymbolTable {
        n_b: scales.len(),
        supports,
        cums,
    }
}

/// Scale probabilities to integer frequencies summing to 2¹⁶ with every
/// entry at least 1. Largest-remainder apportionment, ties by index.
fn quantize_frequencies(probs: &[f64]) -> Vec<u32> {
    let n = probs.len();
    assert!(n < (FREQ_TOTAL as usize) / 2, "symbol alphabet too large");
    let budget = (FREQ_TOTAL as usize - n) as f64;
    let sum: f64 = probs.iter().sum();
    let mut freqs: Vec<u32> = Vec::with_capacity(n);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut assigned = 0u32;
    for (i, &p) in probs.iter().enumerate() {
        let raw = (p / sum) * budget;
        let f = raw.floor();
        freqs.push(f as u32 + 1);
        assigned += f as u32 + 1;
        remainders.push((i, raw - f));
    }
    let mut leftover = FREQ_TOTAL - assigned;
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut idx = 0;
    while leftover > 0 {
        freqs[remainders[idx % n].0] += 1;
        leftover -= 1;
        idx += 1;
    }
    let mut cums = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cums.push(0);
    for f in freqs {
        acc += f;
        cums.push(acc);
    }
    debug_assert_eq!(acc, FREQ_TOTAL);
    cums
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.low += cum as u64 * r as u64;
        self.range = r * freq;
        while self.range < RANGE_TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        // the byte just cached leaves `low`; keep 32 bits so carries stay 0/1
        self.low = ((self.low as u32) << 8) as u64;
    }

    /// Near-minimal termination: round `low` up to the coarsest power-of-two
    /// boundary inside [low, low + range), so everything below the boundary
    /// is zero and the decoder can reconstruct it by zero-padding. Trailing
    /// zero bytes are dropped from the payload entirely.
    ///
    /// Returns the payload and its meaningful bit length: everything emitted
    /// minus the `k` free bits below the boundary and the leading byte when
    /// it is the information-free initial zero.
    fn finish(mut self) -> (Vec<u8>, u32) {
        let k = 31 - self.range.leading_zeros().min(31);
        let mask = (1u64 << k) - 1;
        // low + range ≤ 2³³ is a coder invariant, so the rounded value still
        // fits the 33-bit window and carries stay single-bit
        self.low = (self.low + mask) & !mask;
        for _ in 0..5 {
            self.shift_low();
        }
        let emitted = 8 * self.out.len() as u32;
        let leading = if self.out.first() == Some(&0) { 8 } else { 0 };
        let bit_len = emitted.saturating_sub(k + leading);
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        (self.out, bit_len)
    }
}

struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    /// Payloads are stored with trailing zeros trimmed; reads past the end
    /// restore them.
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode_target(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        (self.code / r).min(FREQ_TOTAL - 1)
    }

    fn decode_update(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.code = self.code.wrapping_sub(cum * r);
        self.range = r * freq;
        while self.range < RANGE_TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Coded feedback of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u16,
    pub n_b: u16,
    pub supports: Vec<i64>,
    /// Meaningful code length in bits; the stored payload may be shorter
    /// (trailing padding trimmed) or byte-padded relative to this.
    pub bit_len: u32,
    pub payload: Vec<u8>,
}

impl Bitstream {
    /// Meaningful code length in bits (excludes byte-alignment padding).
    pub fn payload_bits(&self) -> usize {
        self.bit_len as usize
    }

    pub fn total_bits(&self) -> usize {
        self.to_bytes().len() * 8
    }

    /// Little-endian wire form: version, N_b, supports (u16 each), bit
    /// length (u32), payload length (u32), CRC-32 of the payload, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 2 * self.supports.len() + self.payload.len());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.n_b.to_le_bytes());
        for &s in &self.supports {
            out.extend_from_slice(&(s as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.bit_len.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32(&self.payload).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let need = |n: usize, at: usize| -> Result<()> {
            if data.len() < at + n {
                Err(Error::Decode("bitstream truncated".into()))
            } else {
                Ok(())
            }
        };
        need(4, 0)?;
        let version = u16::from_le_bytes([data[0], data[1]]);
        if version != BITSTREAM_VERSION {
            return Err(Error::Decode(format!(
                "unsupported bitstream version {version}"
            )));
        }
        let n_b = u16::from_le_bytes([data[2], data[3]]);
        let mut pos = 4;
        let mut supports = Vec::with_capacity(n_b as usize);
        for _ in 0..n_b {
            need(2, pos)?;
            supports.push(u16::from_le_bytes([data[pos], data[pos + 1]]) as i64);
            pos += 2;
        }
        need(12, pos)?;
        let bit_len = u32::from_le_bytes([data[pos], data[pos + 1], data[pos + 2], data[pos + 3]]);
        let payload_len =
            u32::from_le_bytes([data[pos + 4], data[pos + 5], data[pos + 6], data[pos + 7]]) as usize;
        let checksum =
            u32::from_le_bytes([data[pos + 8], data[pos + 9], data[pos + 10], data[pos + 11]]);
        pos += 12;
        need(payload_len, pos)?;
        let payload = data[pos..pos + payload_len].to_vec();
        if crc32(&payload) != checksum {
            return Err(Error::Decode("payload checksum mismatch".into()));
        }
        Ok(Self {
            version,
            n_b,
            supports,
            bit_len,
            payload,
        })
    }
}

/// Encode one quantized feedback vector.
pub fn range_encode(symbols: &[i64], table: &SymbolTable) -> Result<Bitstream> {
    if symbols.len() != table.n_b {
        return Err(Error::Config(format!(
            "expected {} symbols, got {}",
            table.n_b,
            symbols.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (dim, &v) in symbols.iter().enumerate() {
        match table.index_of(dim, v) {
            Some(idx) => enc.encode(table.cum(dim, idx), table.freq(dim, idx)),
            None => {
                let esc = table.escape_index(dim);
                enc.encode(table.cum(dim, esc), table.freq(dim, esc));
                let raw = v as i32 as u32;
                enc.encode(raw >> 16, 1);
                enc.encode(raw & 0xFFFF, 1);
            }
        }
    }
    let (payload, bit_len) = enc.finish();
    Ok(Bitstream {
        version: BITSTREAM_VERSION,
        n_b: table.n_b as u16,
        supports: table.supports.clone(),
        bit_len,
        payload,
    })
}

/// Decode a stream produced with the same table. Exact symbol recovery or a
/// decode error, never silently wrong values.
pub fn range_decode(stream: &Bitstream, table: &SymbolTable) -> Result<Vec<i64>> {
    if stream.n_b as usize != table.n_b || stream.supports != table.supports {
        return Err(Error::Decode(
            "bitstream header does not match the symbol table".into(),
        ));
    }
    let mut dec = RangeDecoder::new(&stream.payload);
    let mut out = Vec::with_capacity(table.n_b);
    for dim in 0..table.n_b {
        let target = dec.decode_target();
        let idx = table.lookup(dim, target);
        dec.decode_update(table.cum(dim, idx), table.freq(dim, idx));
        if idx == table.escape_index(dim) {
            let hi = dec.decode_target();
            dec.decode_update(hi, 1);
            let lo = dec.decode_target();
            dec.decode_update(lo, 1);
            out.push(((hi << 16) | lo) as i32 as i64);
        } else {
            out.push(idx as i64 - table.supports[dim]);
        }
    }
    Ok(out)
}

/// Mean realized payload bits per vector over a batch of quantized latents.
pub fn measure_rate(batch: &[Vec<i64>], table: &SymbolTable) -> Result<f64> {
    let mut total_bits = 0usize;
    for symbols in batch {
        total_bits += range_encode(symbols, table)?.payload_bits();
    }
    Ok(total_bits as f64 / batch.len() as f64)
}

/// Quantize a batch tensor of latents row by row.
pub fn quantize_batch(latents: &Tensor) -> Vec<Vec<i64>> {
    let (rows, cols) = (latents.rows(), latents.cols());
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| crate::encoder::quantize_value(latents.at(r, c)))
                .collect()
        })
        .collect()
}
