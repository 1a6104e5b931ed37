//! Quadtree context model over the detail symbols.
//!
//! Group 0 of the 2×2 schedule uses learned per-channel priors. Each later
//! group has its own small network that sees the symbol grid multiplied by
//! the mask of already decoded groups, so its prediction cannot depend on
//! anything else. Distribution parameters are in symbol units.

use candle_core::{Device, Tensor};
use dlf_core::{quadtree_schedule, CodingSchedule, Laplace, GROUP_COUNT, P_MIN};

use crate::error::{DlfError, Result};
use crate::nn::{softplus, Conv, Linear};
use crate::params::{Param, ParamBuilder};

/// Lower bound of the Laplace scale in symbol units.
pub const SCALE_MIN: f64 = 0.11;

struct ContextNet {
    conv: Conv,
    out: Linear,
    bias: Param,
}

pub struct EntropyModel {
    prior_mu: Param,
    prior_scale: Param,
    nets: Vec<ContextNet>,
    channels: usize,
}

/// Partially decoded symbol grid, channels-last `h × w × C_d`.
#[derive(Debug, Clone)]
pub struct DecodedContext {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub symbols: Vec<i32>,
    /// Groups `0..groups_filled` hold decoded values.
    pub groups_filled: usize,
}

impl DecodedContext {
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            symbols: vec![0; height * width * channels],
            groups_filled: 0,
        }
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    /// Writes group `k` from values in the schedule's channel-major order.
    pub fn fill_group(&mut self, schedule: &CodingSchedule, k: usize, values: &[i32]) -> Result<()> {
        if k != self.groups_filled {
            return Err(DlfError::Causality(format!(
                "group {k} filled while {} groups are decoded",
                self.groups_filled
            )));
        }
        let positions: Vec<_> = schedule.group_positions(k, self.channels).collect();
        if positions.len() != values.len() {
            return Err(DlfError::Shape(format!(
                "group {k} has {} symbols, got {}",
                positions.len(),
                values.len()
            )));
        }
        for ((c, y, x), &v) in positions.into_iter().zip(values) {
            let i = self.index(c, y, x);
            self.symbols[i] = v;
        }
        self.groups_filled += 1;
        Ok(())
    }
}

/// `(h, w, 1)` mask of positions in groups `< k`.
fn context_mask(h: usize, w: usize, k: usize, device: &Device) -> Result<Tensor> {
    let m = quadtree_schedule(h, w).context_mask(k);
    Ok(Tensor::from_vec(m, (h, w, 1), device)?)
}

/// `(h, w, 1)` indicator of group `k`.
fn group_mask(h: usize, w: usize, k: usize, device: &Device) -> Result<Tensor> {
    let m: Vec<f32> = (0..h * w)
        .map(|i| f32::from(u8::from(dlf_core::group_of(i / w, i % w) == k)))
        .collect();
    Ok(Tensor::from_vec(m, (h, w, 1), device)?)
}

impl EntropyModel {
    pub fn new(pb: &mut ParamBuilder, channels: usize, hidden: usize) -> Result<Self> {
        let mut pb = pb.pp("entropy");
        let prior_mu = pb.zeros("prior_mu", &[channels])?;
        let prior_scale = pb.constant("prior_scale", &[channels], 1.0)?;
        let nets = (1..GROUP_COUNT)
            .map(|k| {
                let mut pb = pb.pp(format!("group{k}"));
                Ok(ContextNet {
                    conv: Conv::new(&mut pb, "conv", channels, hidden, 3)?,
                    out: Linear::new(&mut pb, "out", hidden, 2 * channels)?,
                    bias: pb.zeros("bias", &[2 * channels])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            prior_mu,
            prior_scale,
            nets,
            channels,
        })
    }

    /// `(μ, b)` for every position of `ctx` (`(B, h, w, C_d)`, symbol
    /// units) as if it belonged to group `k`. Positions of groups `≥ k` are
    /// masked out before the network sees them.
    pub fn params_for_group(&self, ctx: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = ctx.dims4()?;
        if c != self.channels {
            return Err(DlfError::Shape(format!("context has {c} channels, model {}", self.channels)));
        }
        if k == 0 {
            let mu = self.prior_mu.t().broadcast_as((b, h, w, c))?.contiguous()?;
            let scale = (softplus(&self.prior_scale.t())? + SCALE_MIN)?
                .broadcast_as((b, h, w, c))?
                .contiguous()?;
            return Ok((mu, scale));
        }
        let net = &self.nets[k - 1];
        let masked = ctx.broadcast_mul(&context_mask(h, w, k, ctx.device())?)?;
        let hid = net.conv.forward(&masked)?.gelu()?;
        let o = net.out.forward(&hid)?.broadcast_add(&net.bias.t())?;
        let mu = o.narrow(3, 0, c)?;
        let scale = (softplus(&o.narrow(3, c, c)?)? + SCALE_MIN)?;
        Ok((mu, scale))
    }

    /// Parameters for every position under its own group, assembled from the
    /// four masked predictions.
    pub fn params_all(&self, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, h, w, _) = ctx.dims4()?;
        let mut mu: Option<Tensor> = None;
        let mut scale: Option<Tensor> = None;
        for k in 0..GROUP_COUNT {
            let (m, s) = self.params_for_group(ctx, k)?;
            let g = group_mask(h, w, k, ctx.device())?;
            let (m, s) = (m.broadcast_mul(&g)?, s.broadcast_mul(&g)?);
            mu = Some(match mu {
                None => m,
                Some(acc) => (acc + m)?,
            });
            scale = Some(match scale {
                None => s,
                Some(acc) => (acc + s)?,
            });
        }
        // GROUP_COUNT > 0, so both are set.
        Ok((mu.unwrap(), scale.unwrap()))
    }

    /// Distributions of group `k` in channel-major coding order.
    pub fn predict_distribution(&self, ctx: &DecodedContext, k: usize, device: &Device) -> Result<Vec<Laplace>> {
        if k >= GROUP_COUNT {
            return Err(DlfError::InvalidInput(format!("group {k} does not exist")));
        }
        if ctx.groups_filled < k {
            return Err(DlfError::Causality(format!(
                "group {k} needs groups 0..{k} decoded, only {} are",
                ctx.groups_filled
            )));
        }
        let schedule = quadtree_schedule(ctx.height, ctx.width);
        let v: Vec<f32> = ctx.symbols.iter().map(|&s| s as f32).collect();
        let t = Tensor::from_vec(v, (1, ctx.height, ctx.width, ctx.channels), device)?;
        let (mu, scale) = self.params_for_group(&t, k)?;
        let mu: Vec<f32> = mu.flatten_all()?.to_vec1()?;
        let scale: Vec<f32> = scale.flatten_all()?.to_vec1()?;
        Ok(schedule
            .group_positions(k, ctx.channels)
            .map(|(c, y, x)| {
                let i = ctx.index(c, y, x);
                Laplace::new(f64::from(mu[i]), f64::from(scale[i]))
            })
            .collect())
    }
}

/// Differentiable bits of `values` (symbol units, any real) under
/// discretized Laplace `(μ, b)` with the coding floor:
/// `-log2(P_MIN + (1 − 255 P_MIN) · P(|v − ½, v + ½|))`, summed per batch
/// entry. Returns shape `(B,)`.
pub fn laplace_bits(values: &Tensor, mu: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let lo = ((values - 0.5)? - mu)?.div(scale)?;
    let hi = ((values + 0.5)? - mu)?.div(scale)?;
    // Reflect intervals centred above the mode into the lower tail.
    let flip = (&lo + &hi)?.gt(0.0)?;
    let a = flip.where_cond(&hi.neg()?, &lo)?;
    let c = flip.where_cond(&lo.neg()?, &hi)?;
    let cdf = |t: &Tensor| -> Result<Tensor> {
        // 0.5 + 0.5 · sign(t) · (1 − e^{−|t|}); exp never overflows.
        let tail = (1.0 - t.abs()?.neg()?.exp()?)?;
        Ok(((t.sign()? * tail)?.affine(0.5, 0.5))?)
    };
    let mass = (cdf(&c)? - cdf(&a)?)?.relu()?;
    let keep = 1.0 - dlf_core::ALPHABET_SIZE as f64 * P_MIN;
    let p = ((mass * keep)? + P_MIN)?;
    let bits = (p.log()? * (-1.0 / std::f64::consts::LN_2))?;
    let b = bits.dim(0)?;
    Ok(bits.reshape((b, ()))?.sum(1)?)
}
