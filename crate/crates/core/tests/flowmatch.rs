mod common;

use common::{example, lively, randn, rng};
use kinelift::flowmatch::*;
use kinelift_autograd::{AdamW, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn degenerate_sampler_returns_sigmoid_of_mean() {
    for mu in [-2.0, 0.0, 0.4, 3.0] {
        let mut s = TimestepSampler::new(mu, 0.0, 9).unwrap();
        let want = 1.0 / (1.0 + f64::exp(-mu));
        assert!(sample_timesteps(64, &mut s).unwrap().iter().all(|&t| t == want));
    }
}

#[test]
fn standard_logit_normal_median_is_one_half() {
    let mut s = TimestepSampler::new(0.0, 1.0, 2024).unwrap();
    let mut t = sample_timesteps(100_000, &mut s).unwrap();
    t.sort_by(f64::total_cmp);
    let median = 0.5 * (t[49_999] + t[50_000]);
    assert!((median - 0.5).abs() < 0.01, "median {median}");
}

#[test]
fn sampler_rejects_bad_parameters() {
    assert!(TimestepSampler::new(0.0, -1.0, 0).is_err());
    assert!(TimestepSampler::new(f64::NAN, 1.0, 0).is_err());
    let mut s = TimestepSampler::new(0.0, 1.0, 0).unwrap();
    assert!(sample_timesteps(0, &mut s).is_err());
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let x0: Tensor<f64> = randn(&[3, 4, 5], 1);
    let x1: Tensor<f64> = randn(&[3, 4, 5], 2);
    assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
    let neg = x1.map(|v| -v);
    assert!(interpolate(&neg, &x1, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(interpolate(&x0, &randn::<f64>(&[3, 4], 3), 0.5).is_err());
}

#[test]
fn interpolation_matches_loop_oracle() {
    let x0: Tensor<f64> = randn(&[4, 2, 3], 5);
    let x1: Tensor<f64> = randn(&[4, 2, 3], 6);
    let t = [0.1, 0.5, 0.77, 0.999];
    let got = interpolate_batch(&x0, &x1, &t).unwrap();
    let per = 6;
    for i in 0..24 {
        let ti = t[i / per];
        let want = ti * x1.data()[i] + (1.0 - ti) * x0.data()[i];
        assert_eq!(got.data()[i], want);
    }
    let single = interpolate(&x0, &x1, 0.3).unwrap();
    for i in 0..24 {
        assert_eq!(single.data()[i], 0.3 * x1.data()[i] + 0.7 * x0.data()[i]);
    }
}

#[test]
fn target_velocity_is_constant_along_the_path() {
    let x0: Tensor<f64> = randn(&[2, 8], 7);
    let x1: Tensor<f64> = randn(&[2, 8], 8);
    let a = FlowMatchBatch::new(x0.clone(), x1.clone(), vec![0.1, 0.2]).unwrap();
    let b = FlowMatchBatch::new(x0, x1, vec![0.9, 0.6]).unwrap();
    assert_eq!(a.vt, b.vt);
    assert_ne!(a.xt, b.xt);
}

#[test]
fn loss_reference_values() {
    let x0: Tensor<f64> = randn(&[2, 16, 3, 3], 10);
    let x1: Tensor<f64> = randn(&[2, 16, 3, 3], 11);
    let v = x1.zip_map(&x0, |a, b| a - b);
    assert_eq!(fm_loss(&v, &x0, &x1).unwrap(), 0.0);

    let ones = x0.map(|u| u + 1.0);
    let zero = Tensor::zeros(x0.shape());
    assert!((fm_loss(&zero, &x0, &ones).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn loss_matches_accumulation_oracle() {
    let pred: Tensor<f64> = randn(&[3, 16, 2, 2], 12);
    let x0: Tensor<f64> = randn(&[3, 16, 2, 2], 13);
    let x1: Tensor<f64> = randn(&[3, 16, 2, 2], 14);
    let mut acc = 0.0;
    for i in 0..pred.numel() {
        let e = pred.data()[i] - (x1.data()[i] - x0.data()[i]);
        acc += e * e;
    }
    let want = acc / pred.numel() as f64;
    assert!((fm_loss(&pred, &x0, &x1).unwrap() - want).abs() < 1e-12);
}

#[test]
fn non_finite_inputs_are_errors() {
    let x0: Tensor<f64> = randn(&[4, 4], 15);
    let mut bad = x0.clone();
    bad.data_mut()[5] = f64::NAN;
    assert!(fm_loss(&bad, &x0, &x0).is_err());
    assert!(fm_loss(&x0, &bad, &x0).is_err());
    assert!(fm_loss(&x0, &x0, &bad).is_err());
}

#[test]
fn masked_rows_do_not_contribute() {
    let pred: Tensor<f64> = randn(&[4, 6], 16);
    let x0: Tensor<f64> = randn(&[4, 6], 17);
    let x1: Tensor<f64> = randn(&[4, 6], 18);
    let mask = [true, false, true, false];
    let base = fm_loss_masked(&pred, &x0, &x1, Some(&mask)).unwrap();
    let mut moved = pred.clone();
    for j in 0..6 {
        moved.data_mut()[6 + j] += 100.0;
        moved.data_mut()[18 + j] -= 3.0;
    }
    assert_eq!(fm_loss_masked(&moved, &x0, &x1, Some(&mask)).unwrap(), base);
    moved.data_mut()[0] += 1.0;
    assert_ne!(fm_loss_masked(&moved, &x0, &x1, Some(&mask)).unwrap(), base);
}

#[test]
fn euler_reproduces_target_for_constant_field() {
    let x0: Tensor<f64> = randn(&[2, 16, 2, 2], 19);
    let x1: Tensor<f64> = randn(&[2, 16, 2, 2], 20);
    let v = x1.zip_map(&x0, |a, b| a - b);
    for steps in 1..=64 {
        let mut field = |_: &Tensor<f64>, _: f64| Ok(v.clone());
        let out = integrate_euler(&mut field, &x0, steps).unwrap();
        let worst = out.data().iter().zip(x1.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "steps {steps}: {worst:e}");
    }
    // dyadic data and power-of-two step counts leave no rounding at all
    let mut r = rng(21);
    let a = Tensor::new(&[32], (0..32).map(|_| r.random_range(-8..8) as f64).collect());
    let b = Tensor::new(&[32], (0..32).map(|_| r.random_range(-8..8) as f64).collect());
    let v = b.zip_map(&a, |p, q| p - q);
    for steps in [1, 2, 4, 8, 32] {
        let mut field = |_: &Tensor<f64>, _: f64| Ok(v.clone());
        assert_eq!(integrate_euler(&mut field, &a, steps).unwrap(), b);
    }
}

#[test]
fn euler_visits_left_endpoints() {
    let mut seen = Vec::new();
    let x0 = Tensor::<f64>::zeros(&[1]);
    let mut field = |x: &Tensor<f64>, t: f64| {
        seen.push(t);
        Ok(x.map(|_| 1.0))
    };
    integrate_euler(&mut field, &x0, 4).unwrap();
    assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75]);
    let mut f = |x: &Tensor<f64>, _: f64| Ok(x.clone());
    assert!(integrate_euler(&mut f, &x0, 0).is_err());
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let mut m = lively::<f64>(2);
    let ex = example(&m, 2, 4, 30);
    let before = m.store.checksum(|_| true);
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
    let lr = LearningRates { autoencoder: 0.0, scratch: 0.0, finetune: 0.0, backbone: 0.0, adapter: 0.0 };
    let mut losses = Vec::new();
    for _ in 0..3 {
        let s = train_step(&mut m, &mut opt, &[&ex], &FlowConfig::default(), &lr, 1.0, &mut rng(99)).unwrap();
        assert!(s.loss.is_finite() && s.loss >= 0.0);
        losses.push(s.loss);
    }
    assert_eq!(m.store.checksum(|_| true), before);
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_lowers_the_loss_on_a_fixed_draw() {
    let mut m = lively::<f64>(0);
    let ex = example(&m, 1, 4, 31);
    let x0: Tensor<f64> = randn(ex.target_latents.shape(), 32);
    let first = evaluate_loss(&m, &ex, &x0, 0.5).unwrap();
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let lr = LearningRates::default();
    for _ in 0..20 {
        train_step(&mut m, &mut opt, &[&ex], &FlowConfig { logit_std: 0.0, ..FlowConfig::default() }, &lr, 1.0, &mut rng(33)).unwrap();
    }
    assert!(evaluate_loss(&m, &ex, &x0, 0.5).unwrap() < first);
}

#[test]
fn missing_target_video_is_reported() {
    let m = lively::<f32>(0);
    let ex = example(&m, 1, 4, 40);
    let err = TrainExample::prepare(&m, ex.refs.clone(), ex.drive.without_target()).unwrap_err();
    assert_eq!(err.code(), "E_MISSING_TARGET");
    assert!(err.to_string().contains("target video"), "{err}");
}

#[test]
fn sampling_is_seeded_and_integration_matters() {
    let m = lively::<f32>(2);
    let ex = example(&m, 2, 8, 50);
    let a = sample_video(&m, &ex.refs, &ex.drive, 4, 7).unwrap();
    let b = sample_video(&m, &ex.refs, &ex.drive, 4, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[2, 3, 16, 16]);
    assert_ne!(sample_video(&m, &ex.refs, &ex.drive, 4, 8).unwrap(), a);
    let one = sample_latents(&m, &ex.refs, &ex.drive, 1, 7).unwrap();
    let many = sample_latents(&m, &ex.refs, &ex.drive, 32, 7).unwrap();
    assert_ne!(one, many);
}

proptest! {
    #[test]
    fn timesteps_stay_open(mu in -50.0f64..50.0, sigma in 0.0f64..20.0, seed in any::<u64>()) {
        let mut s = TimestepSampler::new(mu, sigma, seed).unwrap();
        for t in sample_timesteps(32, &mut s).unwrap() {
            prop_assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn interpolation_is_affine_in_t(t in 0.0f64..1.0, seed in 0u64..1000) {
        let x0: Tensor<f64> = randn(&[12], seed);
        let x1: Tensor<f64> = randn(&[12], seed + 1);
        let xt = interpolate(&x0, &x1, t).unwrap();
        for i in 0..12 {
            let want = x0.data()[i] + t * (x1.data()[i] - x0.data()[i]);
            prop_assert!((xt.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000) {
        let p: Tensor<f64> = randn(&[5, 3], seed);
        let a: Tensor<f64> = randn(&[5, 3], seed + 1);
        let b: Tensor<f64> = randn(&[5, 3], seed + 2);
        prop_assert!(fm_loss(&p, &a, &b).unwrap() >= 0.0);
    }
}
