//! Range coder with a 32-bit range, 16-bit probabilities and carry
//! propagation through a cached byte (the LZMA construction).
//!
//! The encoder's first output byte is always zero and is not emitted; the
//! decoder accounts for that, so a stream of `n` normalisation shifts occupies
//! exactly `n + 4` bytes and the decoder consumes every one of them. Empty
//! symbol sequences produce an empty payload.

use alloc::vec::Vec;

use crate::cdf::{CdfTable, PRECISION_BITS, TOTAL_FREQ};

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoderError {
    #[error("symbol {symbol} outside alphabet of {alphabet} symbols at position {position}")]
    SymbolOutOfRange {
        position: usize,
        symbol: usize,
        alphabet: usize,
    },
    #[error("payload truncated after {consumed} bytes")]
    Truncated { consumed: usize },
    #[error("payload is not a valid stream for the given tables")]
    Corrupt,
    #[error("{remaining} unread bytes after the last symbol")]
    TrailingBytes { remaining: usize },
    #[error("table provider failed at symbol {position}")]
    Provider { position: usize },
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    symbols: usize,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            first: true,
            symbols: 0,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) -> Result<(), CoderError> {
        let (start, width) = table
            .interval(symbol)
            .ok_or(CoderError::SymbolOutOfRange {
                position: self.symbols,
                symbol,
                alphabet: table.alphabet_size(),
            })?;
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * width;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        self.symbols += 1;
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut pending = self.cache;
            loop {
                self.emit(pending.wrapping_add(carry));
                pending = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    /// Number of symbols encoded so far.
    pub fn len(&self) -> usize {
        self.symbols
    }

    pub fn is_empty(&self) -> bool {
        self.symbols == 0
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols == 0 {
            return Vec::new();
        }
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    /// Starts decoding a non-empty payload.
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(CoderError::Truncated { consumed: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize, CoderError> {
        let r = self.range >> PRECISION_BITS;
        let value = self.code / r;
        if value >= TOTAL_FREQ {
            return Err(CoderError::Corrupt);
        }
        let symbol = table.find(value);
        let (start, width) = table.interval(symbol).ok_or(CoderError::Corrupt)?;
        self.code -= r * start;
        self.range = r * width;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(symbol)
    }

    /// Checks that the whole payload was consumed.
    pub fn finish(self) -> Result<(), CoderError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            remaining => Err(CoderError::TrailingBytes { remaining }),
        }
    }
}

/// Encodes `symbols`, asking `provider(i, &symbols[..i])` for the table of
/// symbol `i`. Providers may adapt to everything coded before `i`.
pub fn range_encode<F>(symbols: &[usize], mut provider: F) -> Result<Vec<u8>, CoderError>
where
    F: FnMut(usize, &[usize]) -> Option<CdfTable>,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = provider(i, &symbols[..i]).ok_or(CoderError::Provider { position: i })?;
        enc.encode(&table, s)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`] for `count` symbols with the same provider.
pub fn range_decode<F>(payload: &[u8], mut provider: F, count: usize) -> Result<Vec<usize>, CoderError>
where
    F: FnMut(usize, &[usize]) -> Option<CdfTable>,
{
    if count == 0 {
        return match payload.len() {
            0 => Ok(Vec::new()),
            remaining => Err(CoderError::TrailingBytes { remaining }),
        };
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = provider(i, &out).ok_or(CoderError::Provider { position: i })?;
        let s = dec.decode(&table)?;
        out.push(s);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform256() -> CdfTable {
        CdfTable::uniform(256).unwrap()
    }

    #[test]
    fn empty_sequence_is_empty_payload() {
        let bytes = range_encode(&[], |_, _| Some(uniform256())).unwrap();
        assert!(bytes.len() <= 8);
        assert!(bytes.is_empty());
        assert_eq!(range_decode(&[], |_, _| Some(uniform256()), 0).unwrap(), alloc::vec![]);
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let symbols: Vec<usize> = (0..1000).map(|i| (i * 37 + 11) % 256).collect();
        let bytes = range_encode(&symbols, |_, _| Some(uniform256())).unwrap();
        assert!(bytes.len().abs_diff(1000) <= 8, "{}", bytes.len());
        let back = range_decode(&bytes, |_, _| Some(uniform256()), symbols.len()).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn near_deterministic_table_is_nearly_free() {
        let mut widths = alloc::vec![1u32; 256];
        widths[0] = TOTAL_FREQ - 255;
        let table = CdfTable::from_widths(&widths).unwrap();
        let symbols = alloc::vec![0usize; 1000];
        let bytes = range_encode(&symbols, |_, _| Some(table.clone())).unwrap();
        assert!(bytes.len() <= 16, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, |_, _| Some(table.clone()), 1000).unwrap(), symbols);
    }

    #[test]
    fn rejects_out_of_alphabet_symbol() {
        let t = CdfTable::uniform(4).unwrap();
        let err = range_encode(&[1, 4], |_, _| Some(t.clone())).unwrap_err();
        assert_eq!(
            err,
            CoderError::SymbolOutOfRange {
                position: 1,
                symbol: 4,
                alphabet: 4
            }
        );
    }

    #[test]
    fn truncation_is_detected() {
        let symbols: Vec<usize> = (0..200).map(|i| i % 256).collect();
        let bytes = range_encode(&symbols, |_, _| Some(uniform256())).unwrap();
        let err = range_decode(&bytes[..bytes.len() - 1], |_, _| Some(uniform256()), 200).unwrap_err();
        assert!(matches!(err, CoderError::Truncated { .. }));
        let mut longer = bytes.clone();
        longer.push(0);
        let err = range_decode(&longer, |_, _| Some(uniform256()), 200).unwrap_err();
        assert_eq!(err, CoderError::TrailingBytes { remaining: 1 });
    }

    #[test]
    fn carries_propagate_through_runs_of_ff() {
        // Alternating near-certain top symbol and rare symbols pushes `low`
        // across byte boundaries often enough to exercise the carry path.
        let mut widths = alloc::vec![1u32; 16];
        widths[15] = TOTAL_FREQ - 15;
        let table = CdfTable::from_widths(&widths).unwrap();
        let symbols: Vec<usize> = (0..5000).map(|i| if i % 97 == 0 { i % 15 } else { 15 }).collect();
        let bytes = range_encode(&symbols, |_, _| Some(table.clone())).unwrap();
        assert_eq!(range_decode(&bytes, |_, _| Some(table.clone()), symbols.len()).unwrap(), symbols);
    }
}
