//! Small fixtures shared by unit tests.

use rand::Rng as _;

use crate::backbone::{Backbone, BackboneConfig};
use crate::image::Raster;
use crate::optim::OptimConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::{indexed_seed, rng_from};
use crate::spem::SpemConfig;

pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        channels: 1,
        injection_layers: [0, 1].into(),
        init_gain: 1.0,
        ln_eps: 1e-6,
        pixel_mean: 0.0,
        pixel_std: 1.0,
        position_scale: 1.0,
    }
}

pub fn tiny_backbone() -> Backbone {
    Backbone::new(tiny_backbone_config(), 3).unwrap()
}

pub fn noise_images(n: usize, seed: u64, offset: f64) -> Vec<Raster> {
    (0..n)
        .map(|i| {
            let mut rng = rng_from(indexed_seed(seed, "img", i as u64));
            Raster::new(16, 16, 1, (0..256).map(|_| (offset + 0.5 * rng.random::<f64>()).min(1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn small_pretrain(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 3,
        optim: OptimConfig {
            base_lr: 1e-2,
            warmup_epochs: 1,
            total_epochs: epochs,
            ..OptimConfig::default()
        },
        spem: SpemConfig {
            num_prompts: 3,
            reduced_dim: 4,
            n_init: 2,
            max_iter: 20,
            ..SpemConfig::default()
        },
        eval_size: 4,
        seed: 11,
        ..PretrainConfig::default()
    }
}
