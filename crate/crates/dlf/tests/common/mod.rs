#![allow(dead_code)]

use candle_core::Tensor;
use dlf::config::{ModelConfig, Variant};
use dlf::network::Model;
use dlf::params::ParamGroup;
use dlf_core::Image;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

pub fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        detail_dim: 4,
        stages: 1,
        heads: 2,
        mlp_ratio: 2,
        tokens_per_window: 32,
        codebook_size: 4096,
        detail_window: 8,
        dw_kernel: 3,
        gen_channels: vec![8, 8, 8, 8],
        entropy_hidden: 8,
        variant,
        lambda_index: 0,
    }
}

pub fn tiny_model(variant: Variant, seed: u64) -> Model {
    Model::new(tiny(variant), seed).unwrap()
}

/// Adds seeded `N(0, std²)` noise to every parameter of `group`.
pub fn perturb(model: &Model, group: ParamGroup, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0f32, std as f32).unwrap();
    for (_, var) in model.store.in_group(group) {
        let t = var.as_detached_tensor();
        let noise: Vec<f32> = (0..t.elem_count()).map(|_| normal.sample(&mut rng)).collect();
        let noise = Tensor::from_vec(noise, t.dims(), t.device()).unwrap();
        var.set(&(t + noise).unwrap()).unwrap();
    }
}

pub fn random_image(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..3 * w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
}
