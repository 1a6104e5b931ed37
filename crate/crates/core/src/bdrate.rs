//! Bjøntegaard delta rate with piecewise-cubic (PCHIP) interpolation of
//! log-rate as a function of quality.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdSample {
    pub bpp: f64,
    pub quality: f64,
}

impl RdSample {
    pub fn new(bpp: f64, quality: f64) -> Self {
        Self { bpp, quality }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BdRateError {
    #[error("a curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("rates must be positive and finite with finite quality values")]
    InvalidPoint,
    #[error("quality values of a curve must be distinct")]
    DuplicateQuality,
    #[error("curves do not overlap in quality")]
    NoOverlap,
}

/// Monotone cubic Hermite interpolant through strictly increasing `x`.
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = alloc::vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = Self::end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = Self::end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    /// Shape-preserving three-point end condition.
    fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() || m0 == 0.0 {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    }

    fn segment(&self, t: f64) -> usize {
        let k = self.x.partition_point(|&xi| xi <= t);
        k.clamp(1, self.x.len() - 1) - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }

    /// Exact integral over `[a, b]` (inside the knot range) using two-point
    /// Gauss-Legendre on every knot-aligned piece; exact for cubics.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut cuts: Vec<f64> = alloc::vec![a];
        cuts.extend(self.x.iter().copied().filter(|&xi| xi > a && xi < b));
        cuts.push(b);
        let g = 0.5 / libm::sqrt(3.0);
        cuts.windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let mid = 0.5 * (lo + hi);
                let half = hi - lo;
                0.5 * half * (self.eval(mid - g * half) + self.eval(mid + g * half))
            })
            .sum()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }
}

fn curve_interpolant(points: &[RdSample], orientation: Orientation) -> Result<Pchip, BdRateError> {
    if points.len() < 2 {
        return Err(BdRateError::TooFewPoints(points.len()));
    }
    let sign = match orientation {
        Orientation::HigherIsBetter => 1.0,
        Orientation::LowerIsBetter => -1.0,
    };
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite() {
            return Err(BdRateError::InvalidPoint);
        }
        pts.push((sign * p.quality, libm::log(p.bpp)));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(BdRateError::DuplicateQuality);
    }
    let (x, y) = pts.into_iter().unzip();
    Ok(Pchip::new(x, y))
}

/// Average bitrate difference of `test` relative to `anchor` at equal
/// quality, in percent. Negative values are savings.
pub fn bd_rate(anchor: &[RdSample], test: &[RdSample], orientation: Orientation) -> Result<f64, BdRateError> {
    let a = curve_interpolant(anchor, orientation)?;
    let t = curve_interpolant(test, orientation)?;
    let (a0, a1) = a.domain();
    let (t0, t1) = t.domain();
    let lo = a0.max(t0);
    let hi = a1.min(t1);
    if !(hi > lo) {
        return Err(BdRateError::NoOverlap);
    }
    let avg = (t.integrate(lo, hi) - a.integrate(lo, hi)) / (hi - lo);
    Ok((libm::exp(avg) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(v: &[(f64, f64)]) -> Vec<RdSample> {
        v.iter().map(|&(r, q)| RdSample::new(r, q)).collect()
    }

    #[test]
    fn identical_curves_are_zero() {
        let c = curve(&[(0.1, 30.0), (0.2, 32.5), (0.4, 34.0), (0.8, 36.1)]);
        assert_eq!(bd_rate(&c, &c, Orientation::HigherIsBetter).unwrap(), 0.0);
    }

    #[test]
    fn halved_rates_save_half() {
        let c = curve(&[(0.1, 30.0), (0.2, 32.5), (0.4, 34.0), (0.8, 36.1)]);
        let half: Vec<RdSample> = c.iter().map(|p| RdSample::new(p.bpp / 2.0, p.quality)).collect();
        let v = bd_rate(&c, &half, Orientation::HigherIsBetter).unwrap();
        assert!((v + 50.0).abs() < 1e-9, "{v}");
        let back = bd_rate(&half, &c, Orientation::HigherIsBetter).unwrap();
        assert!((back - 100.0).abs() < 1e-9, "{back}");
    }

    #[test]
    fn orientation_of_distortion_metrics() {
        let anchor = curve(&[(0.1, 0.5), (0.2, 0.3), (0.4, 0.2)]);
        let test: Vec<RdSample> = anchor.iter().map(|p| RdSample::new(p.bpp * 2.0, p.quality)).collect();
        let v = bd_rate(&anchor, &test, Orientation::LowerIsBetter).unwrap();
        assert!((v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let c = curve(&[(0.1, 30.0), (0.2, 32.0)]);
        let far = curve(&[(0.1, 40.0), (0.2, 42.0)]);
        assert_eq!(bd_rate(&c, &far, Orientation::HigherIsBetter), Err(BdRateError::NoOverlap));
        assert_eq!(
            bd_rate(&c[..1], &c, Orientation::HigherIsBetter),
            Err(BdRateError::TooFewPoints(1))
        );
        let dup = curve(&[(0.1, 30.0), (0.2, 30.0)]);
        assert_eq!(bd_rate(&dup, &c, Orientation::HigherIsBetter), Err(BdRateError::DuplicateQuality));
    }

    #[test]
    fn pchip_reproduces_knots_and_lines() {
        let p = Pchip::new(alloc::vec![0.0, 1.0, 3.0, 4.0], alloc::vec![1.0, 3.0, 7.0, 9.0]);
        for (x, y) in [(0.0, 1.0), (1.0, 3.0), (3.0, 7.0), (4.0, 9.0), (2.0, 5.0)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
        assert!((p.integrate(0.0, 4.0) - 20.0).abs() < 1e-12);
    }
}
