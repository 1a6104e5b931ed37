//! Vector quantization of semantic tokens and scalar quantization of the
//! detail latent.

use candle_core::{Device, Tensor};
use dlf_core::SYMBOL_MAX;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlfError, Result};

/// Index of the nearest row of `codebook` (`k × dim`, row-major) for every
/// row of `tokens`. Squared distances accumulate in f64; ties go to the
/// lowest index.
pub fn nearest_indices(tokens: &[f32], codebook: &[f32], dim: usize) -> Result<Vec<u32>> {
    if codebook.is_empty() || dim == 0 {
        return Err(DlfError::InvalidInput("empty codebook".into()));
    }
    if codebook.len() % dim != 0 || tokens.len() % dim != 0 {
        return Err(DlfError::Shape(format!(
            "token width {dim} does not divide codebook ({}) or tokens ({})",
            codebook.len(),
            tokens.len()
        )));
    }
    Ok(tokens
        .chunks_exact(dim)
        .map(|t| {
            let mut best = (f64::INFINITY, 0u32);
            for (i, e) in codebook.chunks_exact(dim).enumerate() {
                let d: f64 = t
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| {
                        let x = f64::from(a) - f64::from(b);
                        x * x
                    })
                    .sum();
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            best.1
        })
        .collect())
}

/// Nearest-entry assignment. `y` is `(..., C)`, `codebook` `(K, C)`.
/// Returns the indices in row-major token order and the looked-up entries,
/// shaped like `y`, with gradients flowing to the codebook only.
pub fn vq_assign(y: &Tensor, codebook: &Tensor) -> Result<(Vec<u32>, Tensor)> {
    let (_, c) = codebook.dims2()?;
    if y.dims().last() != Some(&c) {
        return Err(DlfError::Shape(format!(
            "token shape {:?} does not match codebook width {c}",
            y.dims()
        )));
    }
    let tokens: Vec<f32> = y.detach().flatten_all()?.to_vec1()?;
    let cb: Vec<f32> = codebook.detach().flatten_all()?.to_vec1()?;
    let idx = nearest_indices(&tokens, &cb, c)?;
    let yq = lookup(&idx, codebook)?.reshape(y.dims())?;
    Ok((idx, yq))
}

/// Rows of `codebook` for `indices`, shape `(n, C)`.
pub fn lookup(indices: &[u32], codebook: &Tensor) -> Result<Tensor> {
    let k = codebook.dim(0)?;
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
        return Err(DlfError::InvalidInput(format!("codebook index {bad} out of range {k}")));
    }
    let ids = Tensor::from_vec(indices.to_vec(), indices.len(), codebook.device())?;
    Ok(codebook.index_select(&ids, 0)?)
}

/// `y + sg(yq − y)`: forward value `yq`, gradient of the identity w.r.t. `y`.
pub fn straight_through(y: &Tensor, yq: &Tensor) -> Result<Tensor> {
    Ok((y + (yq - y)?.detach())?)
}

/// `mean_tokens( ‖sg(y) − ŷ‖ + β ‖sg(ŷ) − y‖ )` with the Euclidean norm over
/// the last axis. The norm is written `s / sqrt(s + ε)` so that it is
/// exactly zero at zero and has a finite gradient there.
pub fn codebook_loss(y: &Tensor, yq: &Tensor, beta: f64) -> Result<Tensor> {
    let norm = |d: Tensor| -> Result<Tensor> {
        let s = d.sqr()?.sum(candle_core::D::Minus1)?;
        Ok((&s / (&s + 1e-12)?.sqrt()?)?)
    };
    let codebook_term = norm((y.detach() - yq)?)?;
    let commit_term = norm((yq.detach() - y)?)?;
    Ok((codebook_term + (commit_term * beta)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqMode {
    Round,
    Noise,
}

fn check_steps(steps: &[f32]) -> Result<()> {
    if steps.is_empty() {
        return Err(DlfError::InvalidInput("no quantization steps".into()));
    }
    if let Some(s) = steps.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(DlfError::InvalidInput(format!("quantization step {s} is not positive")));
    }
    Ok(())
}

/// Symbols of a channels-last latent: `round(y / step)` with halves away
/// from zero, saturated to `[-127, 127]`. Channel of element `i` is
/// `i % steps.len()`.
pub fn sq_round(values: &[f32], steps: &[f32]) -> Result<Vec<i32>> {
    check_steps(steps)?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = (v / steps[i % steps.len()]).round();
            // NaN maps to 0 through the saturating cast.
            (s as i32).clamp(-SYMBOL_MAX, SYMBOL_MAX)
        })
        .collect())
}

pub fn sq_dequantize(symbols: &[i32], steps: &[f32]) -> Vec<f32> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| s as f32 * steps[i % steps.len()])
        .collect()
}

/// Uniform noise in `[-½, ½)` shaped like `like`.
pub fn uniform_noise(like: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = like.elem_count();
    let u: Vec<f32> = (0..n).map(|_| rng.random::<f32>() - 0.5).collect();
    Ok(Tensor::from_vec(u, like.dims(), like.device())?)
}

/// Training-time relaxation `y + u · step`, per channel on the last axis.
pub fn sq_noise(y: &Tensor, steps: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let u = uniform_noise(y, rng)?;
    Ok((y + u.broadcast_mul(steps)?)?)
}

/// Symbols of a `(B, h, w, C_d)` tensor as a flat channels-last vector.
pub fn sq_round_tensor(y: &Tensor, steps: &Tensor) -> Result<Vec<i32>> {
    let v: Vec<f32> = y.detach().flatten_all()?.to_vec1()?;
    let s: Vec<f32> = steps.detach().to_vec1()?;
    sq_round(&v, &s)
}

pub fn symbols_to_tensor(symbols: &[i32], shape: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = symbols.iter().map(|&s| s as f32).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn nearest_of_two() {
        let idx = nearest_indices(&[0.9, 0.8], &[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(idx, [1]);
    }

    #[test]
    fn exact_match_and_tie() {
        let cb = [0.0, 0.0, 5.0, 5.0, 2.0, 0.0, 3.0, -1.0];
        assert_eq!(nearest_indices(&[3.0, -1.0], &cb, 2).unwrap(), [3]);
        // (1, 0) is at distance 1 from entries 0 and 2.
        assert_eq!(nearest_indices(&[1.0, 0.0], &cb, 2).unwrap(), [0]);
        assert!(nearest_indices(&[1.0, 0.0], &[], 2).is_err());
    }

    #[test]
    fn codebook_loss_arithmetic() {
        let dev = Device::Cpu;
        let y = Tensor::new(&[[0f32]], &dev).unwrap();
        let yq = Tensor::new(&[[2f32]], &dev).unwrap();
        let l = codebook_loss(&y, &yq, 0.25).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 2.5).abs() < 1e-6, "{l}");
        let z = codebook_loss(&yq, &yq, 0.25).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn scalar_rounding() {
        assert_eq!(sq_round(&[0.49], &[1.0]).unwrap(), [0]);
        assert_eq!(sq_round(&[-1.2], &[0.5]).unwrap(), [-2]);
        assert_eq!(sq_dequantize(&[-2], &[0.5]), [-1.0]);
        assert_eq!(sq_round(&[0.5, -0.5], &[1.0]).unwrap(), [1, -1]);
        assert_eq!(sq_round(&[1e6, -1e6], &[1.0]).unwrap(), [127, -127]);
        assert!(sq_round(&[1.0], &[0.0]).is_err());
        assert!(sq_round(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn noise_stays_within_half_step() {
        let dev = Device::Cpu;
        let y = Tensor::zeros((4, 3), candle_core::DType::F32, &dev).unwrap();
        let steps = Tensor::new(&[0.5f32, 1.0, 2.0], &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out: Vec<Vec<f32>> = sq_noise(&y, &steps, &mut rng).unwrap().to_vec2().unwrap();
        for row in out {
            for (v, s) in row.iter().zip([0.5f32, 1.0, 2.0]) {
                assert!(v.abs() <= s / 2.0);
            }
        }
    }
}
