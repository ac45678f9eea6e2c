//! Integer arithmetic coder driven by per-symbol PMFs.
//!
//! 32-bit interval with pending-bit carry resolution. Each floating-point PMF
//! is quantized to 16-bit frequencies summing to 65536 (floor, minimum 1, the
//! rounding difference to the most probable symbol) identically on both sides.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const TOP: u64 = (1 << 32) - 1;
const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const THREE_QUARTERS: u64 = HALF + QUARTER;
/// Zero bits the decoder may read past the end before it reports truncation.
const MAX_PADDING_BITS: u32 = 32;

fn argmax(v: &[u32]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Frequencies summing to [`FREQ_TOTAL`], every entry at least 1.
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    if pmf.is_empty() || pmf.len() > FREQ_TOTAL as usize {
        return Err(Error::InvalidArgument(format!("alphabet of {} symbols", pmf.len())));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument("PMF entries must be finite and nonnegative".into()));
    }
    let total: f64 = pmf.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("PMF has zero mass".into()));
    }
    let mut freq: Vec<u32> = pmf
        .iter()
        .map(|p| ((p / total * FREQ_TOTAL as f64).floor() as u32).max(1))
        .collect();
    let sum: u64 = freq.iter().map(|&f| f as u64).sum();
    if sum < FREQ_TOTAL as u64 {
        let top = argmax(&freq);
        freq[top] += FREQ_TOTAL - sum as u32;
    } else {
        let mut surplus = sum - FREQ_TOTAL as u64;
        while surplus > 0 {
            let top = argmax(&freq);
            let take = surplus.min(freq[top] as u64 - 1);
            freq[top] -= take as u32;
            surplus -= take;
        }
    }
    Ok(freq)
}

/// MSB-first bit sink tracking the total number of bits written.
#[derive(Debug, Default)]
pub struct BitPacker {
    bytes: Vec<u8>,
    current: u8,
    filled: u8,
    bits: u64,
}

impl BitPacker {
    pub fn push(&mut self, bit: bool) {
        self.current = (self.current << 1) | bit as u8;
        self.filled += 1;
        self.bits += 1;
        if self.filled == 8 {
            self.bytes.push(self.current);
            self.current = 0;
            self.filled = 0;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// Zero-pads the final byte.
    pub fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push(self.current << (8 - self.filled));
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    padding: u32,
}

impl BitReader<'_> {
    fn next(&mut self) -> Result<u64> {
        let byte = self.pos / 8;
        let bit = if byte < self.bytes.len() {
            (self.bytes[byte] >> (7 - self.pos % 8)) & 1
        } else {
            self.padding += 1;
            if self.padding > MAX_PADDING_BITS {
                return Err(Error::CorruptStream("arithmetic payload truncated".into()));
            }
            0
        };
        self.pos += 1;
        Ok(bit as u64)
    }
}

struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitPacker,
}

impl Encoder {
    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    fn encode(&mut self, cum_lo: u64, cum_hi: u64) {
        let range = self.high - self.low + 1;
        self.high = self.low + range * cum_hi / FREQ_TOTAL as u64 - 1;
        self.low += range * cum_lo / FREQ_TOTAL as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out.finish()
    }
}

fn cumulative(freq: &[u32], symbol: usize) -> (u64, u64) {
    let lo: u64 = freq[..symbol].iter().map(|&f| f as u64).sum();
    (lo, lo + freq[symbol] as u64)
}

/// Encodes `symbols`. `pmf(i, prefix)` gives the distribution of symbol `i`
/// given the symbols before it.
pub fn encode_symbols<F>(symbols: &[usize], mut pmf: F) -> Result<Vec<u8>>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = Encoder {
        low: 0,
        high: TOP,
        pending: 0,
        out: BitPacker::default(),
    };
    for (i, &s) in symbols.iter().enumerate() {
        let p = pmf(i, &symbols[..i])?;
        if s >= p.len() {
            return Err(Error::InvalidArgument(format!(
                "symbol {s} at position {i} outside alphabet of {}",
                p.len()
            )));
        }
        if !(p[s] > 0.0) {
            return Err(Error::ZeroProbability { position: i, symbol: s });
        }
        let freq = quantize_pmf(&p)?;
        let (lo, hi) = cumulative(&freq, s);
        enc.encode(lo, hi);
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols with the same provider semantics as [`encode_symbols`].
pub fn decode_symbols<F>(bytes: &[u8], n: usize, mut pmf: F) -> Result<Vec<usize>>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut reader = BitReader { bytes, pos: 0, padding: 0 };
    let mut value = 0u64;
    for _ in 0..32 {
        value = (value << 1) | reader.next()?;
    }
    let (mut low, mut high) = (0u64, TOP);
    for i in 0..n {
        let freq = quantize_pmf(&pmf(i, &out)?)?;
        let range = high - low + 1;
        let scaled = ((value - low + 1) * FREQ_TOTAL as u64 - 1) / range;
        let mut s = 0;
        let mut cum = 0u64;
        while s < freq.len() && cum + freq[s] as u64 <= scaled {
            cum += freq[s] as u64;
            s += 1;
        }
        if s == freq.len() {
            return Err(Error::CorruptStream(format!("no symbol matches at position {i}")));
        }
        out.push(s);
        high = low + range * (cum + freq[s] as u64) / FREQ_TOTAL as u64 - 1;
        low += range * cum / FREQ_TOTAL as u64;
        loop {
            if high < HALF {
            } else if low >= HALF {
                low -= HALF;
                high -= HALF;
                value -= HALF;
            } else if low >= QUARTER && high < THREE_QUARTERS {
                low -= QUARTER;
                high -= QUARTER;
                value -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
            value = (value << 1) | reader.next()?;
        }
    }
    Ok(out)
}

/// `u32` big-endian byte count followed by the coder output.
pub fn write_payload(out: &mut Vec<u8>, coded: &[u8]) -> Result<()> {
    let len = u32::try_from(coded.len()).map_err(|_| Error::InvalidArgument("payload over 4 GiB".into()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(coded);
    Ok(())
}

/// Splits one length-prefixed payload off the front of `bytes`.
pub fn read_payload(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::CorruptStream("missing payload length".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(Error::CorruptStream(format!(
            "payload declares {len} bytes, {} available",
            rest.len()
        )));
    }
    Ok(rest.split_at(len))
}

/// Cross-entropy of `symbols` under the provider, in bits.
pub fn ideal_bits<F>(symbols: &[usize], mut pmf: F) -> Result<f64>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        let p = pmf(i, &symbols[..i])?;
        let total: f64 = p.iter().sum();
        bits -= (p[s] / total).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(q: usize) -> impl FnMut(usize, &[usize]) -> Result<Vec<f64>> {
        move |_, _| Ok(vec![1.0 / q as f64; q])
    }

    /// Deterministic causal PMF depending on the position and the previous symbol.
    fn causal(q: usize, seed: u64) -> impl FnMut(usize, &[usize]) -> Result<Vec<f64>> {
        move |i, prefix| {
            let prev = prefix.last().copied().unwrap_or(0) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9) ^ (prev << 40));
            let raw: Vec<f64> = (0..q).map(|_| rand::Rng::gen_range(&mut rng, 0.02..1.0)).collect();
            let t: f64 = raw.iter().sum();
            Ok(raw.into_iter().map(|v| v / t).collect())
        }
    }

    #[test]
    fn quantized_frequencies() {
        let f = quantize_pmf(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(f, vec![32768, 16384, 16384]);
        let f = quantize_pmf(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f, vec![65534, 1, 1]);
        let f = quantize_pmf(&[1.0 / 3.0; 3]).unwrap();
        assert_eq!(f, vec![21846, 21845, 21845]);
        let f = quantize_pmf(&vec![1e-9; 300].into_iter().chain([1.0]).collect::<Vec<_>>()).unwrap();
        assert_eq!(f.iter().sum::<u32>(), FREQ_TOTAL);
        assert!(f.iter().all(|&v| v >= 1));
        assert!(quantize_pmf(&[]).is_err());
        assert!(quantize_pmf(&[0.0, 0.0]).is_err());
        assert!(quantize_pmf(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn uniform_four_costs_two_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let syms: Vec<usize> = (0..1000).map(|_| rand::Rng::gen_range(&mut rng, 0..4)).collect();
        let bytes = encode_symbols(&syms, uniform(4)).unwrap();
        let bits = bytes.len() * 8;
        assert!((2000..=2064).contains(&bits), "{bits} bits");
        assert_eq!(decode_symbols(&bytes, 1000, uniform(4)).unwrap(), syms);
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_symbols(&[], uniform(4)).unwrap();
        assert!(bytes.is_empty());
        assert!(decode_symbols(&bytes, 0, uniform(4)).unwrap().is_empty());
        let mut framed = Vec::new();
        write_payload(&mut framed, &bytes).unwrap();
        assert_eq!(framed, vec![0, 0, 0, 0]);
    }

    #[test]
    fn skewed_pmf_near_ideal() {
        let p = |_: usize, _: &[usize]| Ok(vec![0.9, 0.1]);
        let syms = vec![0usize; 1000];
        let bytes = encode_symbols(&syms, p).unwrap();
        let ideal = 1000.0 * -(0.9f64).log2();
        assert!((ideal - 152.0).abs() < 0.1);
        assert!((bytes.len() * 8) as f64 <= ideal + 64.0);
        assert_eq!(decode_symbols(&bytes, 1000, p).unwrap(), syms);
    }

    #[test]
    fn single_certain_symbol_is_tiny() {
        let p = |_: usize, _: &[usize]| Ok(vec![0.0, 1.0, 0.0]);
        let bytes = encode_symbols(&[1], p).unwrap();
        assert!(bytes.len() * 8 <= 64);
        assert_eq!(decode_symbols(&bytes, 1, p).unwrap(), vec![1]);
    }

    #[test]
    fn zero_probability_and_range_errors() {
        let p = |_: usize, _: &[usize]| Ok(vec![0.0, 1.0]);
        assert!(matches!(
            encode_symbols(&[1, 0], p),
            Err(Error::ZeroProbability { position: 1, symbol: 0 })
        ));
        assert!(encode_symbols(&[2], p).is_err());
    }

    #[test]
    fn ten_thousand_random_symbols_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let syms: Vec<usize> = (0..10_000).map(|_| rand::Rng::gen_range(&mut rng, 0..7)).collect();
        let bytes = encode_symbols(&syms, causal(7, 5)).unwrap();
        assert_eq!(decode_symbols(&bytes, syms.len(), causal(7, 5)).unwrap(), syms);
        let ideal = ideal_bits(&syms, causal(7, 5)).unwrap();
        assert!(((bytes.len() * 8) as f64) <= ideal + 64.0, "{} > {ideal} + 64", bytes.len() * 8);
    }

    #[test]
    fn truncation_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let syms: Vec<usize> = (0..2000).map(|_| rand::Rng::gen_range(&mut rng, 0..4)).collect();
        let bytes = encode_symbols(&syms, uniform(4)).unwrap();
        assert!(matches!(
            decode_symbols(&bytes[..bytes.len() / 2], syms.len(), uniform(4)),
            Err(Error::CorruptStream(_))
        ));
        let mut framed = Vec::new();
        write_payload(&mut framed, &bytes).unwrap();
        assert!(read_payload(&framed[..framed.len() - 1]).is_err());
        let (body, rest) = read_payload(&framed).unwrap();
        assert_eq!(body, &bytes[..]);
        assert!(rest.is_empty());
    }

    proptest! {
        #[test]
        fn roundtrip_random_causal(q in 1usize..12, n in 0usize..400, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let syms: Vec<usize> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..q)).collect();
            let bytes = encode_symbols(&syms, causal(q, seed)).unwrap();
            prop_assert_eq!(&decode_symbols(&bytes, n, causal(q, seed)).unwrap(), &syms);
            let ideal = ideal_bits(&syms, causal(q, seed)).unwrap();
            prop_assert!(((bytes.len() * 8) as f64) <= ideal + 64.0);
            prop_assert_eq!(bytes, encode_symbols(&syms, causal(q, seed)).unwrap());
        }
    }
}
