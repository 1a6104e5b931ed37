//! Integer cumulative frequency tables shared by the range encoder and decoder.

use alloc::vec::Vec;

/// Probability precision of every table, in bits.
pub const PRECISION_BITS: u32 = 16;
/// Sum of all symbol widths in a table.
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CdfError {
    #[error("alphabet must hold between 1 and {max} symbols, got {got}")]
    AlphabetSize { got: usize, max: usize },
    #[error("probability mass {value} at symbol {symbol} is negative or not finite")]
    InvalidMass { symbol: usize, value: f64 },
    #[error("probability masses sum to zero")]
    ZeroMass,
    #[error("symbol widths sum to {sum}, expected {expected}")]
    BadTotal { sum: u64, expected: u32 },
    #[error("symbol {symbol} has zero width")]
    ZeroWidth { symbol: usize },
}

/// A monotone table `c[0] = 0 <= c[1] <= ... <= c[n] = 2^16` where symbol `s`
/// owns the half-open interval `[c[s], c[s+1])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cumulative: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability mass function to integer widths.
    ///
    /// Every symbol receives `1 + floor(p * (2^16 - n))` so that no width is
    /// zero; the few counts lost to flooring go to the most probable symbol
    /// (lowest index on ties).
    pub fn from_pmf(pmf: &[f64]) -> Result<Self, CdfError> {
        let n = pmf.len();
        if n == 0 || n > TOTAL_FREQ as usize {
            return Err(CdfError::AlphabetSize {
                got: n,
                max: TOTAL_FREQ as usize,
            });
        }
        let mut sum = 0.0;
        for (symbol, &value) in pmf.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(CdfError::InvalidMass { symbol, value });
            }
            sum += value;
        }
        if sum <= 0.0 {
            return Err(CdfError::ZeroMass);
        }

        let spare = f64::from(TOTAL_FREQ - n as u32);
        let mut widths: Vec<u32> = pmf
            .iter()
            .map(|&p| 1 + libm::floor(p / sum * spare) as u32)
            .collect();
        let mode = pmf
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > pmf[best] { i } else { best });
        let assigned: u64 = widths.iter().map(|&w| u64::from(w)).sum();
        let total = u64::from(TOTAL_FREQ);
        if assigned <= total {
            widths[mode] += (total - assigned) as u32;
        } else {
            // Only reachable through rounding in `p / sum`; take the excess
            // from the largest widths, never below 1.
            let mut excess = assigned - total;
            while excess > 0 {
                let widest = (0..n).fold(0, |b, i| if widths[i] > widths[b] { i } else { b });
                let take = excess.min(u64::from(widths[widest] - 1));
                if take == 0 {
                    return Err(CdfError::BadTotal {
                        sum: assigned,
                        expected: TOTAL_FREQ,
                    });
                }
                widths[widest] -= take as u32;
                excess -= take;
            }
        }
        Self::from_widths(&widths)
    }

    /// Builds a table from explicit widths, which must be positive and sum to
    /// `2^16`.
    pub fn from_widths(widths: &[u32]) -> Result<Self, CdfError> {
        let n = widths.len();
        if n == 0 || n > TOTAL_FREQ as usize {
            return Err(CdfError::AlphabetSize {
                got: n,
                max: TOTAL_FREQ as usize,
            });
        }
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc: u64 = 0;
        cumulative.push(0);
        for (symbol, &w) in widths.iter().enumerate() {
            if w == 0 {
                return Err(CdfError::ZeroWidth { symbol });
            }
            acc += u64::from(w);
            if acc > u64::from(TOTAL_FREQ) {
                break;
            }
            cumulative.push(acc as u32);
        }
        if acc != u64::from(TOTAL_FREQ) || cumulative.len() != n + 1 {
            let sum = widths.iter().map(|&w| u64::from(w)).sum();
            return Err(CdfError::BadTotal {
                sum,
                expected: TOTAL_FREQ,
            });
        }
        Ok(Self { cumulative })
    }

    /// Equal widths over `n` symbols; `n` must divide `2^16`.
    pub fn uniform(n: usize) -> Result<Self, CdfError> {
        if n == 0 || TOTAL_FREQ as usize % n != 0 {
            return Err(CdfError::AlphabetSize {
                got: n,
                max: TOTAL_FREQ as usize,
            });
        }
        let w = TOTAL_FREQ / n as u32;
        Self::from_widths(&alloc::vec![w; n])
    }

    pub fn alphabet_size(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cumulative
    }

    /// `(start, width)` of `symbol`, or `None` outside the alphabet.
    pub fn interval(&self, symbol: usize) -> Option<(u32, u32)> {
        if symbol >= self.alphabet_size() {
            return None;
        }
        let lo = self.cumulative[symbol];
        Some((lo, self.cumulative[symbol + 1] - lo))
    }

    pub fn width(&self, symbol: usize) -> u32 {
        self.interval(symbol).map_or(0, |(_, w)| w)
    }

    pub fn widths(&self) -> Vec<u32> {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// The symbol whose interval contains `value`, for `value < 2^16`.
    pub fn find(&self, value: u32) -> usize {
        // First entry strictly greater than value, minus the leading zero.
        self.cumulative[1..].partition_point(|&c| c <= value)
    }

    /// Ideal code length of `symbol` under this table, in bits.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        let w = self.width(symbol);
        f64::from(PRECISION_BITS) - libm::log2(f64::from(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_over_four() {
        let t = CdfTable::from_pmf(&[0.25; 4]).unwrap();
        assert_eq!(t.widths(), [16384, 16384, 16384, 16384]);
        assert_eq!(t, CdfTable::uniform(4).unwrap());
    }

    #[test]
    fn dyadic_pmf_is_exact() {
        let t = CdfTable::from_pmf(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(t.widths(), [32768, 16384, 16384]);
    }

    #[test]
    fn every_width_positive_on_exhaustive_small_sweep() {
        // All PMFs on a 1/8 grid over alphabets of 1..=4 symbols, including
        // masses of exactly zero.
        fn sweep(prefix: &mut Vec<u32>, left: u32, slots: usize) {
            if slots == 1 {
                prefix.push(left);
                let pmf: Vec<f64> = prefix.iter().map(|&k| f64::from(k) / 8.0).collect();
                let t = CdfTable::from_pmf(&pmf).unwrap();
                assert!(t.widths().iter().all(|&w| w >= 1), "{pmf:?}");
                assert_eq!(*t.cumulative().last().unwrap(), TOTAL_FREQ);
                prefix.pop();
                return;
            }
            for k in 0..=left {
                prefix.push(k);
                sweep(prefix, left - k, slots - 1);
                prefix.pop();
            }
        }
        for n in 1..=4 {
            sweep(&mut Vec::new(), 8, n);
        }
    }

    #[test]
    fn tiny_masses_still_get_a_slot() {
        let mut pmf = alloc::vec![1e-30; 255];
        pmf[127] = 1.0;
        let t = CdfTable::from_pmf(&pmf).unwrap();
        assert_eq!(t.width(127), TOTAL_FREQ - 254);
        assert!(t.widths().iter().all(|&w| w >= 1));
    }

    #[test]
    fn find_inverts_interval() {
        let t = CdfTable::from_widths(&[1, 3, 65530, 2]).unwrap();
        for s in 0..4 {
            let (lo, w) = t.interval(s).unwrap();
            assert_eq!(t.find(lo), s);
            assert_eq!(t.find(lo + w - 1), s);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(CdfTable::from_pmf(&[]), Err(CdfError::AlphabetSize { .. })));
        assert!(matches!(CdfTable::from_pmf(&[0.0, 0.0]), Err(CdfError::ZeroMass)));
        assert!(matches!(
            CdfTable::from_pmf(&[0.5, f64::NAN]),
            Err(CdfError::InvalidMass { symbol: 1, .. })
        ));
        assert!(matches!(CdfTable::from_widths(&[0, 65536]), Err(CdfError::ZeroWidth { symbol: 0 })));
        assert!(matches!(CdfTable::from_widths(&[1, 2]), Err(CdfError::BadTotal { .. })));
    }
}
