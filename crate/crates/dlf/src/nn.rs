//! Layers on channels-last tensors.
//!
//! Grids are `(B, H, W, C)`, sequences `(B, L, C)`. Convolutions are an
//! unfold (shifted slices concatenated on the channel axis) followed by a
//! matrix product, which is several times faster than the direct kernel on
//! CPU for the small channel counts used here.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::{Param, ParamBuilder};

pub struct Linear {
    w: Param,
    b: Option<Param>,
    out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, inp: usize, out: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let w = pb.normal("weight", &[inp, out], 1.0 / (inp as f64).sqrt())?;
        let b = Some(pb.zeros("bias", &[out])?);
        Ok(Self { w, b, out })
    }

    /// Zero weight and bias: the layer outputs exactly zero until trained.
    pub fn zeroed(pb: &mut ParamBuilder, name: &str, inp: usize, out: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let w = pb.zeros("weight", &[inp, out])?;
        let b = Some(pb.zeros("bias", &[out])?);
        Ok(Self { w, b, out })
    }

    pub fn with_bias(pb: &mut ParamBuilder, name: &str, inp: usize, out: usize, bias: f64) -> Result<Self> {
        let mut pb = pb.pp(name);
        let w = pb.normal("weight", &[inp, out], 1.0 / (inp as f64).sqrt())?;
        let b = Some(pb.constant("bias", &[out], bias)?);
        Ok(Self { w, b, out })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap_or(&1);
        let rows = x.elem_count() / last.max(1);
        let mut y = x.reshape((rows, last))?.matmul(&self.w.t())?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.t())?;
        }
        let mut out = dims;
        if let Some(l) = out.last_mut() {
            *l = self.out;
        }
        Ok(y.reshape(out)?)
    }
}

pub struct LayerNorm {
    affine: Option<(Param, Param)>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let g = pb.constant("weight", &[dim], 1.0)?;
        let b = pb.zeros("bias", &[dim])?;
        Ok(Self { affine: Some((g, b)) })
    }

    pub fn plain() -> Self {
        Self { affine: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(match &self.affine {
            Some((g, b)) => xn.broadcast_mul(&g.t())?.broadcast_add(&b.t())?,
            None => xn,
        })
    }
}

/// Softmax over the last axis; the shift is detached, so the backward pass
/// only sees the exp/normalize graph.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, zero_proj: bool) -> Result<Self> {
        let mut pb = pb.pp(name);
        let qkv = Linear::new(&mut pb, "qkv", dim, 3 * dim)?;
        let proj = if zero_proj {
            Linear::zeroed(&mut pb, "proj", dim, dim)?
        } else {
            Linear::new(&mut pb, "proj", dim, dim)?
        };
        Ok(Self { qkv, proj, heads })
    }

    /// `x`: `(B, L, C)`. `mask`: additive `(nW, L, L)` where the batch axis
    /// is `B = batch · nW` with windows innermost.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)? * (1.0 / (hd as f64).sqrt()))?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            scores = scores
                .reshape((b / nw, nw, self.heads, l, l))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b, self.heads, l, l))?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, c))?;
        self.proj.forward(&out)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            fc1: Linear::new(&mut pb, "fc1", dim, hidden)?,
            fc2: Linear::new(&mut pb, "fc2", hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block over `(B, L, C)` sequences.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut pb, "norm1", dim)?,
            attn: Attention::new(&mut pb, "attn", dim, heads, false)?,
            norm2: LayerNorm::new(&mut pb, "norm2", dim)?,
            mlp: Mlp::new(&mut pb, "mlp", dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// `(B, H, W, C)` → `(B, H, W, k·k·C)`: zero-padded `k × k` neighbourhoods,
/// offsets in row-major order.
pub fn unfold(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let p = k / 2;
    let xp = x.pad_with_zeros(1, p, p)?.pad_with_zeros(2, p, p)?;
    let mut cols = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            cols.push(xp.narrow(1, dy, h)?.narrow(2, dx, w)?);
        }
    }
    Ok(Tensor::cat(&cols, 3)?)
}

/// Dense `k × k` convolution, stride 1, same padding.
pub struct Conv {
    lin: Linear,
    k: usize,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, inp: usize, out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(pb, name, k * k * inp, out)?,
            k,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.k == 1 {
            return self.lin.forward(x);
        }
        self.lin.forward(&unfold(x, self.k)?)
    }
}

pub struct DepthwiseConv {
    w: Param,
    b: Param,
    k: usize,
    c: usize,
}

impl DepthwiseConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, k: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            w: pb.normal("weight", &[k * k, c], 1.0 / k as f64)?,
            b: pb.zeros("bias", &[c])?,
            k,
            c,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let cols = unfold(x, self.k)?.reshape((b, h, w, self.k * self.k, self.c))?;
        Ok(cols
            .broadcast_mul(&self.w.t())?
            .sum(3)?
            .broadcast_add(&self.b.t())?)
    }
}

/// Depthwise conv, norm, pointwise MLP, residual.
pub struct ConvNeXtBlock {
    dw: DepthwiseConv,
    norm: LayerNorm,
    mlp: Mlp,
}

impl ConvNeXtBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, k: usize, mlp_ratio: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            dw: DepthwiseConv::new(&mut pb, "dw", dim, k)?,
            norm: LayerNorm::new(&mut pb, "norm", dim)?,
            mlp: Mlp::new(&mut pb, "mlp", dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.mlp.forward(&self.norm.forward(&self.dw.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

/// `x + fc(gelu(conv3x3(x)))`.
pub struct ResConv {
    conv: Conv,
    fc: Linear,
}

impl ResConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            conv: Conv::new(&mut pb, "conv", dim, dim, 3)?,
            fc: Linear::new(&mut pb, "fc", dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.fc.forward(&self.conv.forward(x)?.gelu()?)?)?)
    }
}

/// `(B, H, W, 4C)` → `(B, 2H, 2W, C)`.
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 4C)`; inverse of [`depth_to_space`].
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// `(B, H, W, 3)` pixels → `(B, H/p, W/p, p·p·3)` patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / p, p, w / p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / p, w / p, p * p * c))?)
}

/// `(B, H, W, C)` → `(B · H/s · W/s, s·s, C)`, windows in row-major order.
pub fn window_partition(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / s, s, w / s, s, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / s) * (w / s), s * s, c))?)
}

pub fn window_reverse(x: &Tensor, s: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    Ok(x
        .reshape((b, h / s, w / s, s, s, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))?)
}

/// Additive mask keeping attention inside the regions a cyclic shift of
/// `s / 2` brings into the same window.
pub fn shifted_window_mask(h: usize, w: usize, s: usize, device: &Device) -> Result<Tensor> {
    let shift = s / 2;
    let region = |v: usize, n: usize| {
        if v < n - s {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / s, w / s);
    let l = s * s;
    let mut data = vec![0f32; nh * nw * l * l];
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..l)
                .map(|i| {
                    let (y, x) = (wy * s + i / s, wx * s + i % s);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            let base = (wy * nw + wx) * l * l;
            for i in 0..l {
                for j in 0..l {
                    if labels[i] != labels[j] {
                        data[base + i * l + j] = -1e9;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (nh * nw, l, l), device)?)
}

/// Window attention block; odd blocks shift windows by half a window.
pub struct SwinBlock {
    block: TransformerBlock,
    window: usize,
    shifted: bool,
}

impl SwinBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: usize,
        shifted: bool,
    ) -> Result<Self> {
        Ok(Self {
            block: TransformerBlock::new(pb, name, dim, heads, mlp_ratio)?,
            window,
            shifted,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let s = self.window.min(h).min(w);
        let shift = self.shifted && s < h.min(w);
        let xs = if shift {
            x.roll(-((s / 2) as i32), 1)?.roll(-((s / 2) as i32), 2)?
        } else {
            x.clone()
        };
        let mask = if shift {
            Some(shifted_window_mask(h, w, s, x.device())?)
        } else {
            None
        };
        let win = window_partition(&xs, s)?;
        let out = self.block.forward(&win, mask.as_ref())?;
        let y = window_reverse(&out, s, b, h, w)?;
        Ok(if shift {
            y.roll((s / 2) as i32, 1)?.roll((s / 2) as i32, 2)?
        } else {
            y
        })
    }
}

/// `[B, H, W, C]` tensor from planar images of equal size.
pub fn images_to_tensor(images: &[&dlf_core::Image], device: &Device) -> Result<Tensor> {
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        let d = img.data();
        for i in 0..w * h {
            for c in 0..3 {
                data.push(d[c * w * h + i]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?)
}

/// Inverse of [`images_to_tensor`] for one batch entry.
pub fn tensor_to_image(t: &Tensor, index: usize) -> Result<dlf_core::Image> {
    let (_, h, w, _) = t.dims4()?;
    let hwc: Vec<f32> = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut data = vec![0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = hwc[i * 3 + c];
        }
    }
    Ok(dlf_core::Image::new(w, h, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamGroup, ParamStore};

    fn arange(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::arange(0f32, n as f32, &Device::Cpu).unwrap().reshape(shape).unwrap()
    }

    #[test]
    fn space_depth_round_trip() {
        let x = arange(&[2, 4, 6, 3]);
        let y = depth_to_space(&space_to_depth(&x).unwrap()).unwrap();
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn windows_round_trip_and_order() {
        let x = arange(&[1, 4, 4, 1]);
        let w = window_partition(&x, 2).unwrap();
        // Window 1 is the top-right 2×2 block.
        let w1: Vec<f32> = w.get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w1, [2.0, 3.0, 6.0, 7.0]);
        let back = window_reverse(&w, 2, 1, 4, 4).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn unfold_matches_direct_convolution() {
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = seeded_rng(1, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Detail);
        let conv = Conv::new(&mut pb, "c", 2, 3, 3).unwrap();
        let x = (arange(&[1, 5, 4, 2]) * 0.1).unwrap();
        let y: Vec<f32> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let wt: Vec<f32> = store.var("c.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        for oy in 0..5 {
            for ox in 0..4 {
                for o in 0..3 {
                    let mut acc = 0f32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (iy, ix) = (oy as i32 + dy as i32 - 1, ox as i32 + dx as i32 - 1);
                            if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for c in 0..2 {
                                let row = (dy * 3 + dx) * 2 + c;
                                acc += xv[(iy as usize * 4 + ix as usize) * 2 + c] * wt[row * 3 + o];
                            }
                        }
                    }
                    let got = y[(oy * 4 + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes() {
        let x = Tensor::new(&[[1f32, 2.0, -1e9], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f32>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        assert_eq!(s[0][2], 0.0);
        for row in s {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shifted_window_mask(8, 8, 4, &Device::Cpu).unwrap();
        let v: Vec<Vec<Vec<f32>>> = m.to_vec3().unwrap();
        // Top-left window is a single region.
        assert!(v[0].iter().flatten().all(|&x| x == 0.0));
        // Bottom-right window mixes four regions.
        assert_eq!(v[3][0][15], -1e9);
        assert_eq!(v[3][0][1], 0.0);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = dlf_core::Image::new(3, 2, (0..18).map(|i| i as f32 / 18.0).collect()).unwrap();
        let t = images_to_tensor(&[&img], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 2, 3, 3]);
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
    }
}
