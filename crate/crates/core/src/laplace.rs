//! Discretized Laplace distributions over the saturated detail-symbol
//! alphabet `[-127, 127]`.
//!
//! Distribution parameters are expressed in symbol units (the detail latent
//! divided by its quantization step). The two outermost bins absorb the
//! Laplace tails, and the coding PMF mixes in a uniform floor so that every
//! symbol carries at least [`P_MIN`].

use alloc::vec::Vec;

use crate::cdf::{CdfError, CdfTable};

pub const SYMBOL_MAX: i32 = 127;
pub const ALPHABET_SIZE: usize = (2 * SYMBOL_MAX + 1) as usize;
/// Probability floor of every coded symbol.
pub const P_MIN: f64 = 1.0 / 65536.0;

/// Laplace(μ, b) in symbol units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Laplace {
    pub mu: f64,
    pub scale: f64,
}

/// Standard Laplace CDF evaluated at `t = (x - μ) / b`.
fn std_cdf(t: f64) -> f64 {
    if t < 0.0 {
        0.5 * libm::exp(t)
    } else {
        1.0 - 0.5 * libm::exp(-t)
    }
}

impl Laplace {
    pub fn new(mu: f64, scale: f64) -> Self {
        Self { mu, scale }
    }

    /// Mass of `[lo, hi]` with `lo` or `hi` possibly infinite, computed on
    /// the tail closer to zero probability to avoid cancellation.
    pub fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        let a = (lo - self.mu) / self.scale;
        let c = (hi - self.mu) / self.scale;
        // Reflect bins lying mostly above the mode into the lower tail.
        let (a, c) = if a + c > 0.0 { (-c, -a) } else { (a, c) };
        let upper = if c == f64::INFINITY { 1.0 } else { std_cdf(c) };
        let lower = if a == f64::NEG_INFINITY { 0.0 } else { std_cdf(a) };
        (upper - lower).max(0.0)
    }

    /// Unfloored mass of integer `symbol`; the edge symbols include the tails.
    pub fn bin_mass(&self, symbol: i32) -> f64 {
        let s = symbol.clamp(-SYMBOL_MAX, SYMBOL_MAX);
        let lo = if s == -SYMBOL_MAX {
            f64::NEG_INFINITY
        } else {
            f64::from(s) - 0.5
        };
        let hi = if s == SYMBOL_MAX {
            f64::INFINITY
        } else {
            f64::from(s) + 0.5
        };
        self.interval_mass(lo, hi)
    }

    /// Coding PMF over the alphabet, index `symbol + 127`:
    /// `P_MIN + (1 - 255 P_MIN) * mass`.
    pub fn pmf(&self) -> Vec<f64> {
        let keep = 1.0 - ALPHABET_SIZE as f64 * P_MIN;
        let mut masses: Vec<f64> = (-SYMBOL_MAX..=SYMBOL_MAX).map(|s| self.bin_mass(s)).collect();
        let total: f64 = masses.iter().sum();
        for m in masses.iter_mut() {
            *m = P_MIN + keep * (*m / total);
        }
        masses
    }

    pub fn cdf_table(&self) -> Result<CdfTable, CdfError> {
        CdfTable::from_pmf(&self.pmf())
    }

    /// `-log2` of the coding probability of `symbol`.
    pub fn bits(&self, symbol: i32) -> f64 {
        let idx = (symbol.clamp(-SYMBOL_MAX, SYMBOL_MAX) + SYMBOL_MAX) as usize;
        -libm::log2(self.pmf()[idx])
    }
}

/// Maps a saturated symbol to its table index.
pub fn symbol_index(symbol: i32) -> usize {
    (symbol.clamp(-SYMBOL_MAX, SYMBOL_MAX) + SYMBOL_MAX) as usize
}

pub fn index_symbol(index: usize) -> i32 {
    index as i32 - SYMBOL_MAX
}

/// Sum of `-log2 PMF(symbol)` under the coding PMFs.
pub fn estimate_rate(symbols: &[i32], dists: &[Laplace]) -> f64 {
    symbols
        .iter()
        .zip(dists)
        .map(|(&s, d)| d.bits(s))
        .sum()
}

/// `-log2 p` for an explicit PMF entry.
pub fn bits_of_mass(p: f64) -> f64 {
    -libm::log2(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_mass_is_one_bit() {
        assert_eq!(bits_of_mass(0.5), 1.0);
    }

    #[test]
    fn uniform_over_256_is_eight_bits() {
        assert_eq!(bits_of_mass(1.0 / 256.0), 8.0);
    }

    #[test]
    fn unit_laplace_zero_bin() {
        let d = Laplace::new(0.0, 1.0);
        let m = d.bin_mass(0);
        assert!((m - (1.0 - libm::exp(-0.5))).abs() < 1e-15);
        // -log2(1 - e^-0.5) = 1.345677...
        assert!((bits_of_mass(m) - 1.345_677).abs() < 1e-6, "{}", bits_of_mass(m));
    }

    #[test]
    fn pmf_is_normalized_and_floored() {
        for &(mu, b) in &[(0.0, 0.11), (3.7, 0.5), (-120.0, 2.0), (200.0, 1.0), (0.0, 60.0)] {
            let pmf = Laplace::new(mu, b).pmf();
            let sum: f64 = pmf.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "{mu} {b} {sum}");
            assert!(pmf.iter().all(|&p| p >= P_MIN));
        }
    }

    #[test]
    fn tails_are_absorbed_at_the_edges() {
        let d = Laplace::new(500.0, 1.0);
        assert!(d.bin_mass(SYMBOL_MAX) > 0.999_999);
        let d = Laplace::new(-500.0, 1.0);
        assert!(d.bin_mass(-SYMBOL_MAX) > 0.999_999);
    }

    #[test]
    fn far_tail_mass_has_no_cancellation() {
        let d = Laplace::new(0.0, 1.0);
        let m = d.bin_mass(40);
        let exact = 0.5 * (libm::exp(-39.5) - libm::exp(-40.5));
        assert!((m - exact).abs() / exact < 1e-12);
    }

    #[test]
    fn masses_sum_to_one() {
        let d = Laplace::new(1.3, 4.2);
        let s: f64 = (-SYMBOL_MAX..=SYMBOL_MAX).map(|k| d.bin_mass(k)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
