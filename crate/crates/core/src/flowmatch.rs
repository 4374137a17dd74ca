//! Flow-matching objective and sampler: logit-normal timesteps, the linear
//! noise-to-data path, velocity regression, and uniform Euler integration
//! from noise (`t = 0`) to data (`t = 1`).

use std::collections::BTreeMap;

use kinelift_autograd::{clip_grad_norm, AdamW, Graph, ParamId, Scalar, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{DrivingSequence, ReferenceSet};
use crate::error::{Error, Result};
use crate::model::LiftModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub logit_mean: f64,
    pub logit_std: f64,
    pub sample_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { logit_mean: 0.0, logit_std: 1.0, sample_steps: 32 }
    }
}

const T_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Draw one logit-normal timestep, kept strictly inside `(0, 1)`.
pub fn logit_normal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    let z = if sigma > 0.0 {
        Normal::new(mu, sigma).map(|n| n.sample(rng)).unwrap_or(mu)
    } else {
        mu
    };
    (1.0 / (1.0 + (-z).exp())).clamp(f64::MIN_POSITIVE, T_MAX)
}

/// Logit-normal timestep generator with its own seeded state.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    pub mu: f64,
    pub sigma: f64,
    rng: ChaCha8Rng,
}

impl TimestepSampler {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid logit-normal parameters mu={mu}, sigma={sigma}")));
        }
        Ok(TimestepSampler { mu, sigma, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn sample(&mut self) -> f64 {
        logit_normal(self.mu, self.sigma, &mut self.rng)
    }
}

pub fn sample_timesteps(batch_size: usize, sampler: &mut TimestepSampler) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok((0..batch_size).map(|_| sampler.sample()).collect())
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!("interpolate: {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    Ok(x0.zip_map(x1, |u, v| b * v + a * u))
}

/// Per-sample interpolation; `t[i]` applies to slice `i` of the leading axis.
pub fn interpolate_batch<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if x0.shape() != x1.shape() || x0.rank() == 0 || x0.dim(0) != t.len() {
        return Err(Error::Shape(format!(
            "interpolate: {:?} vs {:?} with {} timesteps",
            x0.shape(),
            x1.shape(),
            t.len()
        )));
    }
    let per = x0.numel() / t.len().max(1);
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(i, (&u, &v))| {
            let ti = t[i / per];
            T::lit(ti) * v + T::lit(1.0 - ti) * u
        })
        .collect();
    Ok(Tensor::new(x0.shape(), data))
}

/// One training draw: `xt` on the path and the target velocity `vt = x1 − x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatchBatch<T> {
    pub x1: Tensor<T>,
    pub x0: Tensor<T>,
    pub t: Vec<f64>,
    pub xt: Tensor<T>,
    pub vt: Tensor<T>,
}

impl<T: Scalar> FlowMatchBatch<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: Vec<f64>) -> Result<Self> {
        let xt = interpolate_batch(&x0, &x1, &t)?;
        let vt = x1.zip_map(&x0, |a, b| a - b);
        Ok(FlowMatchBatch { x1, x0, t, xt, vt })
    }
}

fn check_finite<T: Scalar>(name: &str, x: &Tensor<T>) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("flow-matching loss input `{name}`")))
    }
}

/// Mean squared error between `pred` and `x1 − x0`. Non-finite inputs are an error.
pub fn fm_loss<T: Scalar>(pred: &Tensor<T>, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<f64> {
    fm_loss_masked(pred, x0, x1, None)
}

/// As [`fm_loss`], restricted to rows (slices of the leading axis) where `mask` is true.
pub fn fm_loss_masked<T: Scalar>(pred: &Tensor<T>, x0: &Tensor<T>, x1: &Tensor<T>, mask: Option<&[bool]>) -> Result<f64> {
    if pred.shape() != x0.shape() || pred.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "fm_loss: prediction {:?}, x0 {:?}, x1 {:?}",
            pred.shape(),
            x0.shape(),
            x1.shape()
        )));
    }
    check_finite("prediction", pred)?;
    check_finite("x0", x0)?;
    check_finite("x1", x1)?;
    let rows = if pred.rank() == 0 { 1 } else { pred.dim(0) };
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(Error::Shape(format!("mask length {} for {rows} rows", m.len())));
        }
    }
    let per = pred.numel() / rows.max(1);
    let (mut sum, mut count) = (0.0f64, 0usize);
    for r in 0..rows {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        for i in r * per..(r + 1) * per {
            let d = pred.data()[i].as_f64() - (x1.data()[i].as_f64() - x0.data()[i].as_f64());
            sum += d * d;
        }
        count += per;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("fm_loss: mask selects nothing".into()));
    }
    Ok(sum / count as f64)
}

/// Graph form: `mean((pred − target)²)`.
pub fn fm_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape())));
    }
    check_finite("target", target)?;
    let t = g.input(target.clone());
    let d = g.sub(pred, t);
    let d2 = g.sqr(d);
    Ok(g.mean(d2))
}

/// Anything that can report a velocity at `(x, t)`.
pub trait VelocityField<T> {
    fn velocity(&mut self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

impl<T, F> VelocityField<T> for F
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    fn velocity(&mut self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self(x, t)
    }
}

/// Uniform Euler steps from `t = 0` to `t = 1`, evaluating the field at the left end of each step.
pub fn integrate_euler<T: Scalar>(field: &mut impl VelocityField<T>, x0: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * dt;
        let v = field.velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape(format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("velocity at t={t}")));
        }
        let h = T::lit(dt);
        x = x.zip_map(&v, |a, b| a + h * b);
    }
    Ok(x)
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub autoencoder: f64,
    /// Condition encoders, expression embeddings, condition patch embeddings, identity featurizer.
    pub scratch: f64,
    /// Video patch embedding and velocity head.
    pub finetune: f64,
    /// Base transformer weights.
    pub backbone: f64,
    pub adapter: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { autoencoder: 2e-3, scratch: 1e-3, finetune: 1e-3, backbone: 1e-3, adapter: 1e-3 }
    }
}

impl LearningRates {
    /// Rates for fine-tuning a pretrained backbone: new modules at 1e-4,
    /// adapters and patch embeddings at 1e-5, base weights frozen.
    pub fn pretrained_finetune() -> Self {
        LearningRates { autoencoder: 0.0, scratch: 1e-4, finetune: 1e-5, backbone: 0.0, adapter: 1e-5 }
    }

    pub fn rate(&self, group: &str) -> f64 {
        match group {
            crate::model::AUTOENCODER_GROUP => self.autoencoder,
            crate::model::SCRATCH_GROUP => self.scratch,
            crate::backbone::FINETUNE_GROUP => self.finetune,
            crate::backbone::BACKBONE_GROUP => self.backbone,
            crate::backbone::ADAPTER_GROUP => self.adapter,
            _ => 0.0,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        LearningRates {
            autoencoder: self.autoencoder * f,
            scratch: self.scratch * f,
            finetune: self.finetune * f,
            backbone: self.backbone * f,
            adapter: self.adapter * f,
        }
    }
}

/// A training pair with its frozen-autoencoder latents precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub refs: ReferenceSet<T>,
    /// Scaled image latents of the reference frames, `[M, 16, h, w]`.
    pub ref_latents: Tensor<T>,
    pub drive: DrivingSequence<T>,
    /// Clean video latents `x1`, `[N/4, 16, h, w]`.
    pub target_latents: Tensor<T>,
}

impl<T: Scalar> TrainExample<T> {
    /// Fails with [`Error::MissingTarget`] when the driving sequence has no target video.
    pub fn prepare(model: &LiftModel<T>, refs: ReferenceSet<T>, drive: DrivingSequence<T>) -> Result<Self> {
        let target_latents = model.target_latents(&drive)?;
        let ref_latents = model.encode_latents(&refs.images)?;
        Ok(TrainExample { refs, ref_latents, drive, target_latents })
    }
}

/// Loss graph of one example at a given noise draw and timestep.
pub fn example_loss<T: Scalar>(
    model: &LiftModel<T>,
    ex: &TrainExample<T>,
    x0: &Tensor<T>,
    t: f64,
) -> Result<(Graph<T>, Var)> {
    let x1 = &ex.target_latents;
    let xt = interpolate(x0, x1, t)?;
    let vt = x1.zip_map(x0, |a, b| a - b);
    let mut g = Graph::new();
    let (r, d, c) = model.condition_graph(&mut g, &ex.refs, &ex.ref_latents, &ex.drive)?;
    let pred = model.velocity_graph(&mut g, &r, &d, c, &xt, t)?;
    let loss = fm_loss_graph(&mut g, pred, &vt)?;
    Ok((g, loss))
}

/// Flow-matching loss of one example without touching parameters.
pub fn evaluate_loss<T: Scalar>(model: &LiftModel<T>, ex: &TrainExample<T>, x0: &Tensor<T>, t: f64) -> Result<f64> {
    let (g, loss) = example_loss(model, ex, x0, t)?;
    Ok(g.value(loss).item().as_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub timesteps: Vec<f64>,
}

/// One optimizer update over `batch`, gradients accumulated sequentially and
/// averaged. Draws `t` then `x0` per example from `rng`.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut LiftModel<T>,
    opt: &mut AdamW<T>,
    batch: &[&TrainExample<T>],
    flow: &FlowConfig,
    lr: &LearningRates,
    clip: f64,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut acc: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
    let mut total = 0.0;
    let mut timesteps = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = logit_normal(flow.logit_mean, flow.logit_std, rng);
        let x0 = Tensor::randn(ex.target_latents.shape(), 1.0, rng);
        let (g, loss) = example_loss(model, ex, &x0, t)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at t={t}")));
        }
        total += value;
        timesteps.push(t);
        let grads = g.backward(loss);
        for (id, gr) in g.param_grads(&grads) {
            match acc.get_mut(&id) {
                Some(a) => *a = a.zip_map(&gr, |x, y| x + y),
                None => {
                    acc.insert(id, gr);
                }
            }
        }
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    let mut grads: Vec<(ParamId, Tensor<T>)> = acc.into_iter().map(|(id, g)| (id, g.map(|v| v * inv))).collect();
    let grad_norm = clip_grad_norm(&mut grads, clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    opt.step(&mut model.store, &grads, |group| lr.rate(group));
    Ok(StepStats { loss: total / batch.len() as f64, grad_norm, timesteps })
}

/// Integrate video latents from seeded noise with `steps` Euler steps.
pub fn sample_latents<T: Scalar>(
    model: &LiftModel<T>,
    refs: &ReferenceSet<T>,
    drv: &DrivingSequence<T>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let drv = drv.without_target();
    let ref_latents = model.encode_latents(&refs.images)?;
    let cond = model.condition_tokens(refs, &ref_latents, &drv)?;
    let l = model.config.latent_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(&[drv.latent_frames(), crate::encoders::LATENT_CHANNELS, l, l], 1.0, &mut rng);
    let mut field = |x: &Tensor<T>, t: f64| model.predict_velocity(&cond, x, t);
    integrate_euler(&mut field, &x0, steps)
}

/// Generate one frame per latent frame, `[N/4, 3, H, W]`, from noise replacing the target video.
pub fn sample_video<T: Scalar>(
    model: &LiftModel<T>,
    refs: &ReferenceSet<T>,
    drv: &DrivingSequence<T>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let latents = sample_latents(model, refs, drv, steps, seed)?;
    model.decode_latents(&latents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_sampler_is_constant() {
        let mut s = TimestepSampler::new(0.7, 0.0, 1).unwrap();
        let expect = 1.0 / (1.0 + (-0.7f64).exp());
        for t in sample_timesteps(10, &mut s).unwrap() {
            assert_eq!(t, expect);
        }
    }

    #[test]
    fn extreme_logits_stay_open() {
        let mut s = TimestepSampler::new(60.0, 0.0, 1).unwrap();
        let t = s.sample();
        assert!(t < 1.0 && t > 0.0);
        let mut s = TimestepSampler::new(-800.0, 0.0, 1).unwrap();
        let t = s.sample();
        assert!(t < 1.0 && t > 0.0);
    }

    #[test]
    fn unit_offset_loss() {
        let x0 = Tensor::<f64>::zeros(&[3, 4]);
        let x1 = Tensor::ones(&[3, 4]);
        assert_eq!(fm_loss(&Tensor::zeros(&[3, 4]), &x0, &x1).unwrap(), 1.0);
        assert_eq!(fm_loss(&x1, &x0, &x1).unwrap(), 0.0);
    }

    #[test]
    fn nan_is_an_error() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        p.data_mut()[1] = f64::NAN;
        let e = fm_loss(&p, &Tensor::zeros(&[2]), &Tensor::zeros(&[2])).unwrap_err();
        assert_eq!(e.code(), "E_NONFINITE");
    }
}
