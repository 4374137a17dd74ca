mod common;

use common::{cfg_with_rank, example, lively, randn, randomize, rng};
use kinelift::backbone::{ADAPTER_GROUP, BACKBONE_GROUP};
use kinelift::flowmatch::{train_step, FlowConfig, LearningRates, TrainExample};
use kinelift::LiftModel;
use kinelift_autograd::{AdamW, Scalar, Tensor};
use proptest::prelude::*;

fn velocity<T: Scalar>(m: &LiftModel<T>, ex: &TrainExample<T>, t: f64) -> Tensor<T> {
    let cond = m.condition_tokens(&ex.refs, &ex.ref_latents, &ex.drive).unwrap();
    let xt = randn(ex.target_latents.shape(), 77);
    m.predict_velocity(&cond, &xt, t).unwrap()
}

#[test]
fn zero_initialized_adapters_are_bit_identical() {
    let plain = lively::<f64>(0);
    let adapted = lively::<f64>(3);
    let ex = example(&plain, 2, 8, 10);
    for t in [0.0, 0.3, 1.0] {
        let a = velocity(&plain, &ex, t);
        let b = velocity(&adapted, &ex, t);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "t = {t}");
        assert!(a.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn adapter_parameter_count() {
    let plain = LiftModel::<f32>::new(cfg_with_rank(0)).unwrap();
    let r = 3;
    let adapted = LiftModel::<f32>::new(cfg_with_rank(r)).unwrap();
    let expected: usize = plain.dit.projections().map(|p| r * (p.base.d_in + p.base.d_out)).sum();
    assert_eq!(adapted.parameter_count() - plain.parameter_count(), expected);
    // q, k, v of self- and cross-attention in every layer
    assert_eq!(adapted.dit.projections().filter(|p| p.adapter.is_some()).count(), 6 * 2);
}

#[test]
fn attach_rejects_rank_zero_and_double_attachment() {
    let mut m = LiftModel::<f32>::new(cfg_with_rank(0)).unwrap();
    assert!(m.dit.attach_adapters(&mut m.store, 0, 1.0, 1, false).is_err());
    m.dit.attach_adapters(&mut m.store, 2, 0.5, 1, false).unwrap();
    assert_eq!(m.dit.attach_adapters(&mut m.store, 2, 0.5, 1, false).unwrap_err().code(), "E_STATE");
}

#[test]
fn merge_matches_wrapped_forward() {
    let mut m = lively::<f32>(4);
    randomize(&mut m, "lora_b", 0.2, 9);
    let ex = example(&m, 2, 8, 20);
    let wrapped = velocity(&m, &ex, 0.6);
    let removed = m.dit.merge_adapters(&mut m.store);
    assert_eq!(removed.len(), 2 * 12);
    assert!(!m.dit.has_adapters());
    assert!(m.store.iter().all(|(_, e)| e.group != ADAPTER_GROUP));
    let merged = velocity(&m, &ex, 0.6);
    let num: f64 = wrapped.data().iter().zip(merged.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    let den: f64 = wrapped.data().iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    assert!(num / den <= 1e-5, "relative difference {}", num / den);
}

#[test]
fn merging_zero_adapters_leaves_base_untouched() {
    let mut m = LiftModel::<f32>::new(cfg_with_rank(2)).unwrap();
    let base = m.store.checksum(|e| e.group == BACKBONE_GROUP);
    m.dit.merge_adapters(&mut m.store);
    assert_eq!(m.store.checksum(|e| e.group == BACKBONE_GROUP), base);

    let before = m.store.checksum(|_| true);
    assert!(m.dit.merge_adapters(&mut m.store).is_empty());
    assert_eq!(m.store.checksum(|_| true), before);
}

#[test]
fn frozen_base_trains_adapters_only() {
    let mut m = lively::<f32>(0);
    m.dit.attach_adapters(&mut m.store, 2, 0.5, 4, true).unwrap();
    let ex = example(&m, 2, 4, 30);
    let base = m.store.checksum(|e| e.group == BACKBONE_GROUP);
    let adapters = m.store.checksum(|e| e.group == ADAPTER_GROUP);
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let lr = LearningRates { autoencoder: 0.0, scratch: 0.0, finetune: 0.0, backbone: 1e-2, adapter: 1e-2 };
    let mut r = rng(5);
    for _ in 0..3 {
        train_step(&mut m, &mut opt, &[&ex], &FlowConfig::default(), &lr, 1.0, &mut r).unwrap();
    }
    assert_eq!(m.store.checksum(|e| e.group == BACKBONE_GROUP), base);
    assert_ne!(m.store.checksum(|e| e.group == ADAPTER_GROUP), adapters);
}

#[test]
fn forward_is_deterministic() {
    let m = lively::<f32>(2);
    let ex = example(&m, 1, 4, 40);
    assert_eq!(velocity(&m, &ex, 0.5), velocity(&m, &ex, 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn velocity_matches_latent_shape(refs in 1usize..4, frames in 1usize..4, seed in 0u64..100) {
        let m = lively::<f32>(2);
        let ex = example(&m, refs, 4 * frames, seed);
        let v = velocity(&m, &ex, 0.5);
        prop_assert_eq!(v.shape(), ex.target_latents.shape());
        prop_assert!(v.is_finite());
    }
}
