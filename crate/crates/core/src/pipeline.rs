//! End-to-end workflow over the model: dataset tensors, reference manifests,
//! two-stage training with checkpoints and resume, lifting, evaluation and
//! ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kinelift_autograd::{clip_grad_norm, AdamW, Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BACKBONE_GROUP;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use crate::conditioning::{DrivingSequence, ReferenceSet};
use crate::config::{ReferencePolicy, RunConfig};
use crate::encoders::TEMPORAL_FACTOR;
use crate::error::{Error, Result};
use crate::flowmatch::{evaluate_loss, logit_normal, sample_video, train_step, TrainExample};
use crate::image::Image;
use crate::kinematics::{coverage_stats, select_references, ExpressionTrajectory};
use crate::metrics::{evaluate_frames, mse, MetricsReport};
use crate::model::{LiftModel, AUTOENCODER_GROUP};
use crate::seeds::derive_seed;
use crate::synthworld::{Dataset, Sequence};

pub const REFERENCES_FILE: &str = "references.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const AUTOENCODER_CHECKPOINT: &str = "autoencoder.ckpt";
pub const REFERENCE_FORMAT: &str = "kinelift-references";

/// Training examples contribute to the validation probe from at most this many sequences.
const VALIDATION_SEQUENCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceChoice {
    pub indices: Vec<usize>,
    pub seed: u64,
    pub mean_distance: f64,
    pub max_distance: f64,
}

/// K-means reference frames for every sequence of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceManifest {
    pub format: String,
    pub k: usize,
    pub sequences: BTreeMap<String, ReferenceChoice>,
}

impl ReferenceManifest {
    pub fn select(dataset: &Dataset, k: usize) -> Result<Self> {
        let mut sequences = BTreeMap::new();
        for s in &dataset.sequences {
            if k > s.trajectory.len() {
                return Err(Error::InvalidArgument(format!(
                    "k = {k} exceeds the {} frames of {}",
                    s.trajectory.len(),
                    s.entry.name
                )));
            }
            let seed = derive_seed(dataset.manifest.world_seed, &format!("kmeans/{}", s.entry.name));
            let indices = select_references(&s.trajectory, k, seed)?;
            let cov = coverage_stats(&s.trajectory, &indices)?;
            sequences.insert(
                s.entry.name.clone(),
                ReferenceChoice { indices, seed, mean_distance: cov.mean_distance, max_distance: cov.max_distance },
            );
        }
        Ok(ReferenceManifest { format: REFERENCE_FORMAT.into(), k, sequences })
    }

    pub fn indices(&self, name: &str) -> Result<&[usize]> {
        self.sequences
            .get(name)
            .map(|c| c.indices.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no references recorded for sequence {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ReferenceManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != REFERENCE_FORMAT {
            return Err(Error::Format(format!("{}: not a reference manifest", path.display())));
        }
        Ok(m)
    }
}

/// Stack `[3, H, W]` images into `[F, 3, H, W]`.
pub fn stack_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = images
        .into_iter()
        .map(|im| {
            let t = im.to_chw::<T>();
            let s = t.shape().to_vec();
            t.reshape(&[1, s[0], s[1], s[2]]).expect("same element count")
        })
        .collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

pub fn coefficient_tensor<T: Scalar>(traj: &ExpressionTrajectory<f64>) -> Tensor<T> {
    let data: Vec<f64> = traj.coeffs().iter().flat_map(|c| c.values().iter().copied()).collect();
    Tensor::from_f64(&[traj.len(), traj.dim()], &data)
}

/// Rows `idx` of a tensor along axis 0.
pub fn select_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.narrow(0, i, 1)).collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// `[B, 3, H, W]` tensor to images.
pub fn tensor_to_images<T: Scalar>(frames: &Tensor<T>) -> Result<Vec<Image>> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("expected [B, 3, H, W] frames, got {s:?}")));
    }
    (0..s[0]).map(|b| Image::from_chw(s[2], s[3], frames.narrow(0, b, 1).data())).collect()
}

/// One dataset sequence as tensors.
#[derive(Debug, Clone)]
pub struct SequenceTensors<T> {
    pub name: String,
    pub identity: u64,
    pub holdout: bool,
    pub appearance: Vec<Image>,
    /// `[F, 3, H, W]`
    pub images: Tensor<T>,
    /// `[F, 3, H, W]`
    pub shading: Tensor<T>,
    /// `[F, D]`
    pub coeffs: Tensor<T>,
}

impl<T: Scalar> SequenceTensors<T> {
    pub fn from_sequence(s: &Sequence) -> Self {
        SequenceTensors {
            name: s.entry.name.clone(),
            identity: s.entry.identity_seed,
            holdout: s.entry.holdout,
            appearance: s.frames.iter().map(|f| f.appearance.clone()).collect(),
            images: stack_images(s.frames.iter().map(|f| &f.appearance)),
            shading: stack_images(s.frames.iter().map(|f| &f.shading)),
            coeffs: coefficient_tensor(&s.trajectory),
        }
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn references(&self, idx: &[usize]) -> Result<ReferenceSet<T>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("reference frame {bad} outside {} of {} frames", self.name, self.len())));
        }
        ReferenceSet::from_tensors(select_rows(&self.images, idx), select_rows(&self.shading, idx), select_rows(&self.coeffs, idx))
    }

    /// Frames `start..start+n` as a driving clip, optionally with the target video.
    pub fn driving(&self, start: usize, n: usize, with_target: bool) -> Result<DrivingSequence<T>> {
        if start + n > self.len() {
            return Err(Error::InvalidArgument(format!("window {start}+{n} exceeds {} frames", self.len())));
        }
        let clip = |t: &Tensor<T>| t.narrow(0, start, n).permute(&[1, 0, 2, 3]);
        let target = if with_target { Some(clip(&self.images)) } else { None };
        DrivingSequence::from_tensors(clip(&self.shading), self.coeffs.narrow(0, start, n), target)
    }

    /// Ground-truth frames matching the generated keyframes of window `start..start+n`.
    pub fn keyframe_images(&self, start: usize, n: usize) -> Vec<Image> {
        LiftModel::<T>::keyframes(n).into_iter().map(|k| self.appearance[start + k].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub stage: String,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_scale: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timesteps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsLine {
    /// The line without timing, for run-to-run comparison.
    pub fn without_timing(&self) -> MetricsLine {
        MetricsLine { wall_ms: 0.0, ..self.clone() }
    }
}

/// Per-step generator: stream `step` of a keyed ChaCha8, so any step can be replayed in isolation.
pub fn step_rng(seed: u64, stage: &str, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stage));
    rng.set_stream(step);
    rng
}

struct Probe<T> {
    sequence: usize,
    t: f64,
    x0: Tensor<T>,
}

/// Two-stage trainer: autoencoder reconstruction, then flow matching with the autoencoder frozen.
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub model: LiftModel<T>,
    pub ae_opt: AdamW<T>,
    pub opt: AdamW<T>,
    pub state: TrainState,
    pub data: Vec<SequenceTensors<T>>,
    pub train_ids: Vec<usize>,
    pub references: ReferenceManifest,
    latents: Vec<Tensor<T>>,
    probes: Vec<Probe<T>>,
}

const AE_OPT: &str = "autoencoder";
const DIFFUSION_OPT: &str = "diffusion";

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig, dataset: &Dataset, references: ReferenceManifest) -> Result<Self> {
        cfg.validate()?;
        let model = LiftModel::new(cfg.model.clone())?;
        let t = &cfg.train;
        let ae_opt = AdamW::new(t.beta1, t.beta2, t.eps, 0.0);
        let opt = AdamW::new(t.beta1, t.beta2, t.eps, t.weight_decay);
        let mut state = TrainState::default();
        state.seeds.insert("world".into(), cfg.seeds.world);
        state.seeds.insert("train".into(), cfg.seeds.train);
        state.seeds.insert("inference".into(), cfg.seeds.inference);
        state.seeds.insert("init".into(), cfg.model.init_seed);
        state.run = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut tr = Self::assemble(cfg, model, ae_opt, opt, state, dataset, references)?;
        if tr.cfg.train.freeze_base {
            tr.model.set_group_trainable(BACKBONE_GROUP, false);
        }
        Ok(tr)
    }

    /// Continue from a checkpoint written by [`Trainer::run`]. `steps` replaces the configured total when given.
    pub fn resume(ckpt: Checkpoint<T>, dataset: &Dataset, references: ReferenceManifest, steps: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(ckpt.state.run.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint carries no usable run config: {e}")))?;
        if let Some(s) = steps {
            cfg.train.steps = s;
        }
        if cfg.model != ckpt.model.config {
            return Err(Error::Checkpoint("model config in checkpoint does not match its run config".into()));
        }
        let mut opts = ckpt.optimizers;
        let t = &cfg.train;
        let ae_opt = opts.remove(AE_OPT).unwrap_or_else(|| AdamW::new(t.beta1, t.beta2, t.eps, 0.0));
        let opt = opts.remove(DIFFUSION_OPT).unwrap_or_else(|| AdamW::new(t.beta1, t.beta2, t.eps, t.weight_decay));
        let mut tr = Self::assemble(cfg, ckpt.model, ae_opt, opt, ckpt.state, dataset, references)?;
        if tr.scale_fixed() {
            tr.cache_latents()?;
        }
        Ok(tr)
    }

    fn assemble(
        cfg: RunConfig,
        model: LiftModel<T>,
        ae_opt: AdamW<T>,
        opt: AdamW<T>,
        state: TrainState,
        dataset: &Dataset,
        references: ReferenceManifest,
    ) -> Result<Self> {
        let data: Vec<SequenceTensors<T>> = dataset.sequences.iter().map(SequenceTensors::from_sequence).collect();
        if let Some(s) = data.first() {
            let r = cfg.model.resolution;
            if s.images.dim(2) != r || s.images.dim(3) != r {
                return Err(Error::Config(format!(
                    "dataset frames are {}x{}, model expects {r}x{r}",
                    s.images.dim(2),
                    s.images.dim(3)
                )));
            }
        }
        let train_ids: Vec<usize> = (0..data.len()).filter(|&i| !data[i].holdout).collect();
        if train_ids.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training sequences".into()));
        }
        let n = cfg.train.driving_frames;
        if let Some(s) = data.iter().find(|s| s.len() < n) {
            return Err(Error::Config(format!("sequence {} is shorter than driving_frames = {n}", s.name)));
        }
        for &i in &train_ids {
            let k = references.indices(&data[i].name)?.len();
            if k != cfg.train.references {
                return Err(Error::Config(format!(
                    "reference manifest selects {k} frames, config expects {}",
                    cfg.train.references
                )));
            }
        }
        Ok(Trainer { cfg, model, ae_opt, opt, state, data, train_ids, references, latents: Vec::new(), probes: Vec::new() })
    }

    fn scale_fixed(&self) -> bool {
        self.state.latent_scale_fixed
    }

    /// Sequence whose frames serve as references for sequence `i`.
    pub fn reference_source(&self, i: usize) -> usize {
        let identity = self.data[i].identity;
        let same: Vec<usize> = self.train_ids.iter().copied().filter(|&j| self.data[j].identity == identity).collect();
        if self.data[i].holdout {
            return same.first().copied().unwrap_or(i);
        }
        match self.cfg.train.reference_policy {
            ReferencePolicy::SameTrajectory => i,
            ReferencePolicy::OtherTrajectory => match same.iter().position(|&j| j == i) {
                Some(p) if same.len() > 1 => same[(p + 1) % same.len()],
                _ => i,
            },
        }
    }

    pub fn reference_set(&self, i: usize) -> Result<(ReferenceSet<T>, usize, Vec<usize>)> {
        let src = self.reference_source(i);
        let idx = self.references.indices(&self.data[src].name)?.to_vec();
        Ok((self.data[src].references(&idx)?, src, idx))
    }

    /// One autoencoder update on a random batch of training frames.
    pub fn autoencoder_step(&mut self) -> Result<MetricsLine> {
        let started = Instant::now();
        let step = self.state.autoencoder_step;
        let mut rng = step_rng(self.cfg.seeds.train, AE_OPT, step);
        let frames: Vec<Tensor<T>> = (0..self.cfg.train.autoencoder_batch)
            .map(|_| {
                let s = self.train_ids[rng.random_range(0..self.train_ids.len())];
                let f = rng.random_range(0..self.data[s].len());
                self.data[s].images.narrow(0, f, 1)
            })
            .collect();
        let refs: Vec<&Tensor<T>> = frames.iter().collect();
        let batch = Tensor::concat(&refs, 0);
        let mut g = Graph::new();
        let x = g.input(batch);
        let loss = self.model.autoencoder.reconstruction_loss(&mut g, &self.model.store, x)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("autoencoder loss at step {}", step + 1)));
        }
        let grads = g.backward(loss);
        let mut grads = g.param_grads(&grads);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.train.clip_norm);
        let factor = self.cfg.train.lr_factor(step + 1, self.cfg.train.autoencoder_steps);
        let rate = self.cfg.train.lr.autoencoder * factor;
        self.ae_opt
            .step(&mut self.model.store, &grads, |group| if group == AUTOENCODER_GROUP { rate } else { 0.0 });
        self.state.autoencoder_step += 1;
        Ok(MetricsLine {
            stage: AE_OPT.into(),
            step: self.state.autoencoder_step,
            loss: value,
            grad_norm,
            lr_scale: factor,
            timesteps: Vec::new(),
            validation_loss: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Fix the latent scale from training-frame statistics and freeze the autoencoder.
    pub fn finish_autoencoder(&mut self) -> Result<()> {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for &i in &self.train_ids {
            let raw = self.model.encode_raw(&self.data[i].images)?;
            for &v in raw.data() {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        self.model.latent_scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        self.model.set_group_trainable(AUTOENCODER_GROUP, false);
        self.state.latent_scale_fixed = true;
        self.cache_latents()
    }

    fn cache_latents(&mut self) -> Result<()> {
        self.latents = self.data.iter().map(|s| self.model.encode_latents(&s.images)).collect::<Result<_>>()?;
        let n = self.cfg.train.driving_frames;
        let shape = [n / TEMPORAL_FACTOR, self.latents[0].dim(1), self.latents[0].dim(2), self.latents[0].dim(3)];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seeds.train, "validation"));
        self.probes.clear();
        for &s in self.train_ids.iter().take(VALIDATION_SEQUENCES) {
            for _ in 0..self.cfg.train.validation_probes {
                let t = logit_normal(self.cfg.flow.logit_mean, self.cfg.flow.logit_std, &mut rng);
                let x0 = Tensor::randn(&shape, 1.0, &mut rng);
                self.probes.push(Probe { sequence: s, t, x0 });
            }
        }
        Ok(())
    }

    /// Training example for window `start..start+N` of sequence `i`.
    pub fn example(&self, i: usize, start: usize) -> Result<TrainExample<T>> {
        if self.latents.is_empty() {
            return Err(Error::State("latents are not cached; finish the autoencoder stage first".into()));
        }
        let n = self.cfg.train.driving_frames;
        let (refs, src, idx) = self.reference_set(i)?;
        let keys: Vec<usize> = LiftModel::<T>::keyframes(n).into_iter().map(|k| start + k).collect();
        Ok(TrainExample {
            refs,
            ref_latents: select_rows(&self.latents[src], &idx),
            drive: self.data[i].driving(start, n, false)?,
            target_latents: select_rows(&self.latents[i], &keys),
        })
    }

    /// Mean flow-matching loss over the fixed validation draws.
    pub fn validation_loss(&self) -> Result<f64> {
        if self.probes.is_empty() {
            return Err(Error::State("no validation probe before the diffusion stage".into()));
        }
        let mut total = 0.0;
        for p in &self.probes {
            let ex = self.example(p.sequence, 0)?;
            total += evaluate_loss(&self.model, &ex, &p.x0, p.t)?;
        }
        Ok(total / self.probes.len() as f64)
    }

    pub fn diffusion_step(&mut self) -> Result<MetricsLine> {
        let started = Instant::now();
        let step = self.state.diffusion_step;
        let mut rng = step_rng(self.cfg.seeds.train, DIFFUSION_OPT, step);
        let n = self.cfg.train.driving_frames;
        let mut batch = Vec::with_capacity(self.cfg.train.batch_size);
        for _ in 0..self.cfg.train.batch_size {
            let i = self.train_ids[rng.random_range(0..self.train_ids.len())];
            let start = rng.random_range(0..=self.data[i].len() - n);
            batch.push(self.example(i, start)?);
        }
        let factor = self.cfg.train.lr_factor(step + 1, self.cfg.train.steps);
        let mut lr = self.cfg.train.lr.scaled(factor);
        lr.autoencoder = 0.0;
        let refs: Vec<&TrainExample<T>> = batch.iter().collect();
        let stats = train_step(&mut self.model, &mut self.opt, &refs, &self.cfg.flow, &lr, self.cfg.train.clip_norm, &mut rng)?;
        self.state.diffusion_step += 1;
        Ok(MetricsLine {
            stage: DIFFUSION_OPT.into(),
            step: self.state.diffusion_step,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            lr_scale: factor,
            timesteps: stats.timesteps,
            validation_loss: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.state.validation_loss = if self.probes.is_empty() { None } else { Some(self.validation_loss()?) };
        save_checkpoint(path, &self.model, &[(AE_OPT, &self.ae_opt), (DIFFUSION_OPT, &self.opt)], &self.state)
    }

    /// Run both stages to completion, or until `stop_at` diffusion steps.
    ///
    /// With `dir` set, metrics lines are appended to `dir/metrics.jsonl` and
    /// checkpoints go to `dir/checkpoints/`. `on_line` sees every metrics line.
    pub fn run(&mut self, dir: Option<&Path>, stop_at: Option<u64>, mut on_line: impl FnMut(&MetricsLine)) -> Result<()> {
        let mut log = match dir {
            Some(d) => {
                fs::create_dir_all(d.join(CHECKPOINT_DIR)).map_err(|e| Error::io(d, e))?;
                let p = d.join(METRICS_FILE);
                Some((fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut emit = |line: &MetricsLine| -> Result<()> {
            on_line(line);
            if let Some((f, p)) = log.as_mut() {
                let text = serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(f, "{text}").map_err(|e| Error::io(p.clone(), e))?;
            }
            Ok(())
        };
        let every = self.cfg.train.log_every.max(1);
        while self.state.autoencoder_step < self.cfg.train.autoencoder_steps {
            let line = self.autoencoder_step()?;
            if line.step % every == 0 || line.step == self.cfg.train.autoencoder_steps {
                emit(&line)?;
            }
        }
        if !self.scale_fixed() {
            self.finish_autoencoder()?;
            if let Some(d) = dir {
                self.save(&d.join(CHECKPOINT_DIR).join(AUTOENCODER_CHECKPOINT))?;
            }
        } else if self.latents.is_empty() {
            self.cache_latents()?;
        }
        let total = self.cfg.train.steps;
        let stop = stop_at.map_or(total, |s| s.min(total));
        while self.state.diffusion_step < stop {
            let mut line = self.diffusion_step()?;
            let s = line.step;
            let periodic = self.cfg.train.checkpoint_every > 0 && s % self.cfg.train.checkpoint_every == 0;
            if periodic && s < total {
                if let Some(d) = dir {
                    self.save(&checkpoint_path(d, s))?;
                    line.validation_loss = self.state.validation_loss;
                }
            }
            if s % every == 0 || s == stop || line.validation_loss.is_some() {
                emit(&line)?;
            }
        }
        if let Some(d) = dir {
            let path = if self.state.diffusion_step >= total { d.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT) } else { checkpoint_path(d, self.state.diffusion_step) };
            self.save(&path)?;
        }
        Ok(())
    }

    /// Lift every held-out sequence with references from its identity's first
    /// training trajectory, scored against the ground-truth keyframes.
    pub fn evaluate_heldout(&self, sample_steps: usize, seed: u64) -> Result<EvalSummary> {
        let held: Vec<usize> = (0..self.data.len()).filter(|&i| self.data[i].holdout).collect();
        if held.is_empty() {
            return Err(Error::InvalidArgument("dataset has no held-out sequences".into()));
        }
        let mut generated = Vec::new();
        let mut truth = Vec::new();
        for i in held {
            let (refs, _, _) = self.reference_set(i)?;
            let s = &self.data[i];
            let out = lift_sequence(&self.model, &refs, &s.shading, &s.coeffs, self.cfg.train.driving_frames, sample_steps, seed)?;
            truth.extend(out.source_frames.iter().map(|&f| s.appearance[f].clone()));
            generated.extend(out.frames);
        }
        EvalSummary::from_frames(&generated, &truth)
    }
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

/// Read a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LiftOutput {
    pub frames: Vec<Image>,
    /// Driving frame index each output frame corresponds to.
    pub source_frames: Vec<usize>,
}

/// Generate frames for a whole driving trajectory, in consecutive windows of
/// at most `window` frames (each a multiple of 4). A trailing remainder shorter
/// than 4 frames is dropped.
pub fn lift_sequence<T: Scalar>(
    model: &LiftModel<T>,
    refs: &ReferenceSet<T>,
    shading: &Tensor<T>,
    coeffs: &Tensor<T>,
    window: usize,
    steps: usize,
    seed: u64,
) -> Result<LiftOutput> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let window = window - window % TEMPORAL_FACTOR;
    if window == 0 {
        return Err(Error::InvalidArgument(format!("window must hold at least {TEMPORAL_FACTOR} frames")));
    }
    let total = shading.dim(0);
    if coeffs.dim(0) != total {
        return Err(Error::Shape(format!("{total} shading frames vs {} coefficient rows", coeffs.dim(0))));
    }
    let mut frames = Vec::new();
    let mut source_frames = Vec::new();
    let mut start = 0;
    let mut w = 0;
    while start < total {
        let n = window.min(total - start);
        let n = n - n % TEMPORAL_FACTOR;
        if n == 0 {
            break;
        }
        let drv = DrivingSequence::from_tensors(
            shading.narrow(0, start, n).permute(&[1, 0, 2, 3]),
            coeffs.narrow(0, start, n),
            None,
        )?;
        let video = sample_video(model, refs, &drv, steps, derive_seed(seed, &format!("window/{w}")))?;
        frames.extend(tensor_to_images(&video)?);
        source_frames.extend(LiftModel::<T>::keyframes(n).into_iter().map(|k| start + k));
        start += n;
        w += 1;
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("driving sequence needs at least {TEMPORAL_FACTOR} frames")));
    }
    Ok(LiftOutput { frames, source_frames })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
}

impl EvalSummary {
    pub fn from_frames(generated: &[Image], truth: &[Image]) -> Result<Self> {
        let report: MetricsReport = evaluate_frames(generated, truth)?;
        let mean_mse = generated.iter().zip(truth).map(|(a, b)| mse(a, b)).sum::<Result<f64>>()? / generated.len() as f64;
        Ok(EvalSummary { frames: generated.len(), mean_psnr: report.mean_psnr, mean_ssim: report.mean_ssim, mean_mse })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    ExpInjection,
    RefCount,
    Richness,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp-injection" => Ok(AblationAxis::ExpInjection),
            "ref-count" => Ok(AblationAxis::RefCount),
            "richness" => Ok(AblationAxis::Richness),
            _ => Err(Error::InvalidArgument(format!("unknown ablation axis {s:?} (exp-injection, ref-count, richness)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ExpInjection => "exp-injection",
            AblationAxis::RefCount => "ref-count",
            AblationAxis::Richness => "richness",
        }
    }

    /// Named config variants along this axis.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            AblationAxis::ExpInjection => [("with-expression", true), ("without-expression", false)]
                .into_iter()
                .map(|(name, on)| {
                    let mut c = base.clone();
                    c.model.conditioning.use_expression = on;
                    (name.to_string(), c)
                })
                .collect(),
            AblationAxis::RefCount => [1usize, 2, 3, 5]
                .into_iter()
                .map(|m| {
                    let mut c = base.clone();
                    c.train.references = m;
                    (format!("M={m}"), c)
                })
                .collect(),
            AblationAxis::Richness => {
                let probe = RICHNESS_SWEEP.iter().copied().max().unwrap_or(1);
                RICHNESS_SWEEP
                    .iter()
                    .map(|&r| {
                        let mut c = base.clone();
                        c.data.richness = r;
                        c.data.holdout_richness = Some(probe);
                        (format!("richness={r}"), c)
                    })
                    .collect()
            }
        }
    }
}

pub const RICHNESS_SWEEP: [usize; 3] = [1, 2, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub eval: EvalSummary,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Variants in sweep order with their seed-averaged (psnr, ssim, mse).
    pub fn summary(&self) -> Vec<(String, f64, f64, f64)> {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant) {
                order.push(r.variant.clone());
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let n = rows.len() as f64;
                let mean = |f: fn(&EvalSummary) -> f64| rows.iter().map(|r| f(&r.eval)).sum::<f64>() / n;
                (v, mean(|e| e.mean_psnr), mean(|e| e.mean_ssim), mean(|e| e.mean_mse))
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("axis: {}\n", self.axis.name());
        s.push_str("variant\tseed\tpsnr\tssim\tmse\tfinal_loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.5}\t{:.6}\t{:.5}\n",
                r.variant, r.seed, r.eval.mean_psnr, r.eval.mean_ssim, r.eval.mean_mse, r.final_loss
            ));
        }
        s.push_str("\nvariant\tmean_psnr\tmean_ssim\tmean_mse\n");
        for (v, p, ss, m) in self.summary() {
            s.push_str(&format!("{v}\t{p:.4}\t{ss:.5}\t{m:.6}\n"));
        }
        s
    }
}

/// Train and evaluate every variant of `axis` under each seed. Data stays fixed
/// per variant; `seed` sets the initialization, training and sampling seeds.
pub fn ablate<T: Scalar>(
    base: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut datasets: Vec<(crate::synthworld::DatasetSpec, Dataset)> = Vec::new();
    for (name, variant) in axis.variants(base) {
        variant.validate()?;
        let spec = variant.dataset_spec();
        let dataset = match datasets.iter().find(|(s, _)| *s == spec) {
            Some((_, d)) => d.clone(),
            None => {
                let d = Dataset::generate(&spec)?;
                datasets.push((spec, d.clone()));
                d
            }
        };
        let refs = ReferenceManifest::select(&dataset, variant.train.references)?;
        for &seed in seeds {
            let mut cfg = variant.clone();
            cfg.seeds.train = seed;
            cfg.seeds.inference = seed;
            cfg.model.init_seed = seed;
            let mut tr = Trainer::<T>::new(cfg, &dataset, refs.clone())?;
            let mut last = f64::NAN;
            tr.run(None, None, |l| last = l.loss)?;
            let eval = tr.evaluate_heldout(tr.cfg.flow.sample_steps, tr.cfg.seeds.inference)?;
            progress(&format!("{name} seed {seed}: psnr {:.3} mse {:.5}", eval.mean_psnr, eval.mean_mse));
            rows.push(AblationRow { variant: name.clone(), seed, eval, final_loss: last });
        }
    }
    Ok(AblationReport { axis, rows })
}

/// Load a checkpoint and check its recorded validation loss is reproduced by
/// a trainer rebuilt over `dataset`.
pub fn recheck_validation<T: Scalar>(path: &Path, dataset: &Dataset, refs: ReferenceManifest) -> Result<(f64, f64)> {
    let ck = load_checkpoint::<T>(path)?;
    let recorded = ck
        .state
        .validation_loss
        .ok_or_else(|| Error::Checkpoint("checkpoint has no recorded validation loss".into()))?;
    let tr = Trainer::resume(ck, dataset, refs, None)?;
    Ok((recorded, tr.validation_loss()?))
}
