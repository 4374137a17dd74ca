#![allow(dead_code)]

use kinelift::conditioning::{DrivingSequence, ReferenceSet};
use kinelift::flowmatch::TrainExample;
use kinelift::model::ModelConfig;
use kinelift::LiftModel;
use kinelift_autograd::{ParamId, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A model small enough for exhaustive property tests: 16×16 frames, 2×2 latent grid.
pub fn small_config() -> ModelConfig {
    let mut c = ModelConfig { resolution: 16, expression_dim: 4, init_seed: 3, ..ModelConfig::default() };
    c.encoder.base_width = 2;
    c.encoder.autoencoder_width = 4;
    c.conditioning.identity_width = 2;
    c.backbone.d_model = 16;
    c.backbone.n_layers = 2;
    c.backbone.n_heads = 2;
    c.backbone.d_ctx = 8;
    c.backbone.patch = 1;
    c.backbone.ff_mult = 2;
    c.backbone.timestep_dim = 8;
    c.backbone.adapter_rank = 2;
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Overwrite every parameter whose name contains `pattern` with N(0, std²) draws.
pub fn randomize<T: Scalar>(model: &mut LiftModel<T>, pattern: &str, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, e)| e.name.contains(pattern)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = model.store.get(id).shape().to_vec();
        model.store.set(id, Tensor::randn(&shape, std, &mut r)).unwrap();
    }
}

pub fn example<T: Scalar>(m: &LiftModel<T>, refs: usize, frames: usize, seed: u64) -> TrainExample<T> {
    let r = m.config.resolution;
    let d = m.config.expression_dim;
    let set = ReferenceSet::from_tensors(randn(&[refs, 3, r, r], seed), randn(&[refs, 3, r, r], seed + 1), randn(&[refs, d], seed + 2)).unwrap();
    let drive = DrivingSequence::from_tensors(
        randn(&[3, frames, r, r], seed + 3),
        randn(&[frames, d], seed + 4),
        Some(randn(&[3, frames, r, r], seed + 5)),
    )
    .unwrap();
    TrainExample::prepare(m, set, drive).unwrap()
}

pub fn cfg_with_rank(rank: usize) -> ModelConfig {
    let mut c = small_config();
    c.backbone.adapter_rank = rank;
    c
}

/// Give the zero-initialized heads and modulations some weight so outputs are not trivially zero.
pub fn lively<T: Scalar>(rank: usize) -> LiftModel<T> {
    let mut m = LiftModel::<T>::new(cfg_with_rank(rank)).unwrap();
    randomize(&mut m, "head", 0.3, 1);
    randomize(&mut m, "modulation", 0.1, 2);
    m
}

