//! Range asymmetric numeral system coder with byte-wise renormalization.
//!
//! The state is a `u64` kept in `[L, 256 L)` with `L = 2^55` once the first
//! byte has been emitted. Encoding starts from state 0 instead of `L`: while
//! the state is still below `L` no byte is emitted unless the next state
//! would overflow `256 L`, in which case just enough low bytes are flushed
//! to land inside `[L, 256 L)`. The final state is written with the minimal
//! number of bytes, so a stream carries no fixed start-up cost. Decoding
//! mirrors this exactly and must end in state 0 with every byte consumed.

pub mod codec;
pub mod stream;

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub use codec::{compress, decompress, CompressionReport};
pub use stream::CompressedStream;

/// Frequency precision used by the image codec.
pub const DEFAULT_PRECISION: u32 = 24;
/// Largest supported frequency precision.
pub const MAX_PRECISION: u32 = 24;

const LOWER: u64 = 1 << 55;

/// Integer frequency table summing to `2^precision`, every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    precision: u32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

fn check_precision(precision: u32) -> Result<()> {
    if !(1..=MAX_PRECISION).contains(&precision) {
        return Err(Error::Parameter(format!(
            "precision must be in 1..={MAX_PRECISION}, got {precision}"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `pmf` onto `2^precision` with a floor
/// of 1 per symbol. Every symbol first receives 1; the remaining
/// `2^P - n` units are split in proportion to `pmf`, leftovers going to the
/// largest fractional parts with ties broken towards the lower index.
pub fn quantize_cdf(pmf: &[f64], precision: u32) -> Result<QuantizedCdf> {
    check_precision(precision)?;
    let n = pmf.len();
    if n == 0 {
        return Err(Error::Parameter("empty pmf".into()));
    }
    let total = 1u64 << precision;
    if n as u64 > total {
        return Err(Error::Capacity {
            symbols: n,
            precision,
        });
    }
    if let Some(p) = pmf.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Parameter(format!(
            "pmf entry {p} is not a probability"
        )));
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!("pmf sums to {sum}")));
    }
    let spare = total - n as u64;
    let mut freqs = Vec::with_capacity(n);
    let mut fracs = Vec::with_capacity(n);
    let mut used = 0u64;
    for &p in pmf {
        let share = p / sum * spare as f64;
        let whole = (share.floor() as u64).min(spare);
        used += whole;
        freqs.push(1 + whole);
        fracs.push(share - whole as f64);
    }
    // Rounding in `p / sum` can push the floors past `spare` by a few units.
    while used > spare {
        let i = (0..n)
            .filter(|&i| freqs[i] > 1)
            .min_by(|&a, &b| fracs[a].total_cmp(&fracs[b]).then(b.cmp(&a)))
            .expect("some symbol above floor");
        freqs[i] -= 1;
        used -= 1;
    }
    let leftover = (spare - used) as usize;
    if leftover > 0 {
        let order =
            |a: &usize, b: &usize| -> Ordering { fracs[*b].total_cmp(&fracs[*a]).then(a.cmp(b)) };
        let mut idx: Vec<usize> = (0..n).collect();
        if leftover < n {
            idx.select_nth_unstable_by(leftover - 1, order);
        }
        for &i in idx.iter().take(leftover) {
            freqs[i] += 1;
        }
    }
    QuantizedCdf::from_freqs(freqs.into_iter().map(|f| f as u32).collect(), precision)
}

impl QuantizedCdf {
    pub fn from_freqs(freqs: Vec<u32>, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::Parameter(
                "frequencies must be nonempty and positive".into(),
            ));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > 1 << precision {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != 1 << precision {
            return Err(Error::Parameter(format!(
                "frequencies sum to {acc}, expected 2^{precision}"
            )));
        }
        Ok(QuantizedCdf {
            precision,
            freqs,
            cum,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Prefix sums, `cum[0] = 0` and `cum[n] = 2^precision`.
    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Cost of coding `symbol` in bits.
    pub fn bits(&self, symbol: usize) -> f64 {
        self.precision as f64 - (self.freqs[symbol] as f64).log2()
    }

    fn symbol_at(&self, slot: u32) -> usize {
        self.cum.partition_point(|&c| c <= slot) - 1
    }
}

/// Encoder; symbols are coded last-in first-out.
#[derive(Clone, Debug, Default)]
pub struct RansEncoder {
    state: u64,
    bytes: Vec<u8>,
}

impl RansEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(freq: u64, start: u64, precision: u32, x: u64) -> u128 {
        (((x / freq) as u128) << precision) + (x % freq) as u128 + start as u128
    }

    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: usize) -> Result<()> {
        if symbol >= cdf.len() {
            return Err(Error::Domain(format!(
                "symbol {symbol} outside alphabet of {}",
                cdf.len()
            )));
        }
        let f = cdf.freqs[symbol] as u64;
        let start = cdf.cum[symbol] as u64;
        let p = cdf.precision;
        let upper = (LOWER as u128) << 8;
        if self.state < LOWER {
            let mut n = 0;
            while Self::push(f, start, p, self.state >> (8 * n)) >= upper {
                n += 1;
            }
            for _ in 0..n {
                self.bytes.push(self.state as u8);
                self.state >>= 8;
            }
        } else {
            let x_max = ((LOWER >> p) << 8) * f;
            while self.state >= x_max {
                self.bytes.push(self.state as u8);
                self.state >>= 8;
            }
        }
        self.state = Self::push(f, start, p, self.state) as u64;
        Ok(())
    }

    /// Flushes the state and returns the payload.
    pub fn finish(mut self) -> Vec<u8> {
        while self.state > 0 {
            self.bytes.push(self.state as u8);
            self.state >>= 8;
        }
        self.bytes
    }
}

/// Decoder reading a payload produced by [`RansEncoder`] from its end.
#[derive(Clone, Debug)]
pub struct RansDecoder<'a> {
    state: u64,
    bytes: &'a [u8],
    remaining: usize,
}

impl<'a> RansDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = RansDecoder {
            state: 0,
            bytes,
            remaining: bytes.len(),
        };
        d.refill();
        d
    }

    fn refill(&mut self) {
        while self.state < LOWER && self.remaining > 0 {
            self.remaining -= 1;
            self.state = (self.state << 8) | self.bytes[self.remaining] as u64;
        }
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let p = cdf.precision;
        let slot = (self.state & ((1u64 << p) - 1)) as u32;
        let s = cdf.symbol_at(slot);
        let f = cdf.freqs[s] as u64;
        self.state = f * (self.state >> p) + slot as u64 - cdf.cum[s] as u64;
        self.refill();
        Ok(s)
    }

    /// Checks that the payload was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.state != 0 || self.remaining != 0 {
            return Err(Error::Corruption(format!(
                "payload ended in state {:#x} with {} unread bytes",
                self.state, self.remaining
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` under `cdfs[i]`; decoding returns them in order.
pub fn encode_symbols(symbols: &[usize], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Dimension(format!(
            "{} symbols for {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RansEncoder::new();
    for (s, c) in symbols.iter().zip(cdfs).rev() {
        enc.encode(c, *s)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(payload: &[u8], cdfs: &[QuantizedCdf]) -> Result<Vec<usize>> {
    let mut dec = RansDecoder::new(payload);
    let out = cdfs
        .iter()
        .map(|c| dec.decode(c))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
