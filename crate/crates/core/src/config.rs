//! Run configuration: one TOML document covering data, model and training,
//! with environment overrides of the form `KINELIFT_SECTION__KEY=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TEMPORAL_FACTOR;
use crate::error::{Error, Result};
use crate::flowmatch::{FlowConfig, LearningRates};
use crate::model::ModelConfig;
use crate::synthworld::{DatasetSpec, PhongMaterial, ProxyOptions, TrajectoryStyle};

pub const ENV_PREFIX: &str = "KINELIFT_";
pub const ENV_SEPARATOR: &str = "__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Synthetic world: identities, trajectories.
    pub world: u64,
    /// Training noise, timesteps and batch order.
    pub train: u64,
    /// Sampler noise at lift time.
    pub inference: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { world: 0, train: 1, inference: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub identities: Vec<u64>,
    pub trajectories_per_identity: usize,
    /// Frames per synthetic trajectory.
    pub frames: usize,
    /// Number of expression modes each trajectory visits.
    pub richness: usize,
    pub camera_distance: f64,
    pub vertex_budget: usize,
    /// Trailing trajectories per identity kept out of training.
    pub holdout_trajectories: usize,
    /// Richness of the held-out trajectories; `None` uses `richness`.
    pub holdout_richness: Option<usize>,
    pub material: PhongMaterial,
    pub style: TrajectoryStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: vec![1, 2, 3, 4],
            trajectories_per_identity: 3,
            frames: 16,
            richness: 3,
            camera_distance: 3.2,
            vertex_budget: 800,
            holdout_trajectories: 1,
            holdout_richness: None,
            material: PhongMaterial::default(),
            style: TrajectoryStyle::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePolicy {
    /// References come from another training trajectory of the same identity.
    OtherTrajectory,
    /// References come from the driving trajectory itself.
    SameTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to `min_lr_fraction` of the base rate.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Driving frames per example.
    pub driving_frames: usize,
    /// Reference images per example, chosen by K-means over the source trajectory.
    pub references: usize,
    pub reference_policy: ReferencePolicy,
    pub batch_size: usize,
    pub steps: u64,
    pub autoencoder_steps: u64,
    pub autoencoder_batch: usize,
    pub clip_norm: f64,
    pub lr: LearningRates,
    pub schedule: LrSchedule,
    pub warmup_steps: u64,
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keep the base transformer weights fixed and train adapters only.
    pub freeze_base: bool,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Fixed (noise, timestep) draws per example in the validation probe.
    pub validation_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            driving_frames: 16,
            references: 5,
            reference_policy: ReferencePolicy::OtherTrajectory,
            batch_size: 1,
            steps: 2000,
            autoencoder_steps: 600,
            autoencoder_batch: 8,
            clip_norm: 1.0,
            lr: LearningRates::default(),
            schedule: LrSchedule::Cosine,
            warmup_steps: 50,
            min_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            freeze_base: false,
            checkpoint_every: 500,
            log_every: 1,
            validation_probes: 2,
        }
    }
}

impl TrainConfig {
    /// Multiplier on the base learning rates at optimizer step `step` (1-based) of `total`.
    pub fn lr_factor(&self, step: u64, total: u64) -> f64 {
        let warm = if self.warmup_steps > 0 { (step as f64 / self.warmup_steps as f64).min(1.0) } else { 1.0 };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let p = if total > 0 { (step as f64 / total as f64).min(1.0) } else { 1.0 };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                self.min_lr_fraction + (1.0 - self.min_lr_fraction) * c
            }
        };
        warm * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: SeedConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale run: narrower convolution stacks than the bare [`ModelConfig`] default.
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.encoder.base_width = 8;
        model.encoder.autoencoder_width = 16;
        RunConfig {
            seeds: SeedConfig::default(),
            data: DataConfig::default(),
            model,
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read `path` (defaults when `None`) and apply `KINELIFT_*` variables from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply overrides such as `("KINELIFT_TRAIN__STEPS", "100")`. Values parse
    /// as TOML literals, falling back to plain strings. Other variables are ignored.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut any = false;
        for (k, v) in vars {
            let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split(ENV_SEPARATOR).map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("malformed override {}", k.as_ref())));
            }
            set_path(&mut root, &path, parse_literal(v.as_ref()))
                .map_err(|msg| Error::Config(format!("{}: {msg}", k.as_ref())))?;
            any = true;
        }
        if !any {
            return Ok(self.clone());
        }
        toml::Value::Table(root)
            .try_into::<RunConfig>()
            .map_err(|e| Error::Config(format!("after environment overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        let t = &self.train;
        if d.identities.is_empty() || d.trajectories_per_identity == 0 {
            return Err(Error::Config("data needs at least one identity and one trajectory".into()));
        }
        if d.holdout_trajectories >= d.trajectories_per_identity {
            return Err(Error::Config("holdout_trajectories must leave at least one training trajectory".into()));
        }
        if d.frames == 0 || d.richness == 0 || d.richness > d.frames {
            return Err(Error::Config("need 1 <= richness <= frames".into()));
        }
        if t.driving_frames == 0 || t.driving_frames % TEMPORAL_FACTOR != 0 || t.driving_frames > d.frames {
            return Err(Error::Config(format!(
                "driving_frames must be a positive multiple of {TEMPORAL_FACTOR} no larger than data.frames"
            )));
        }
        if t.references == 0 || t.references > d.frames {
            return Err(Error::Config("references must be between 1 and data.frames".into()));
        }
        if t.batch_size == 0 || t.autoencoder_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.min_lr_fraction) {
            return Err(Error::Config("min_lr_fraction must lie in [0, 1]".into()));
        }
        if self.flow.sample_steps == 0 {
            return Err(Error::Config("flow.sample_steps must be positive".into()));
        }
        d.material.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            world_seed: self.seeds.world,
            identities: d.identities.clone(),
            trajectories_per_identity: d.trajectories_per_identity,
            length: d.frames,
            richness: d.richness,
            resolution: self.model.resolution,
            camera_distance: d.camera_distance,
            proxy: ProxyOptions {
                vertex_budget: d.vertex_budget,
                expression_dim: self.model.expression_dim,
                zero_basis: false,
            },
            material: d.material.clone(),
            style: d.style,
            holdout_trajectories: d.holdout_trajectories,
            holdout_richness: d.holdout_richness,
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let next = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => return Err(format!("`{p}` is not a section")),
        };
    }
    // Integers given for float fields are widened so serde accepts them.
    let value = match (cur.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn env_overrides_nested_keys() {
        let cfg = RunConfig::default()
            .with_overrides([
                ("KINELIFT_TRAIN__STEPS", "7"),
                ("KINELIFT_TRAIN__LR__SCRATCH", "5"),
                ("KINELIFT_MODEL__BACKBONE__N_LAYERS", "2"),
                ("KINELIFT_DATA__IDENTITIES", "[9, 10]"),
                ("PATH", "/bin"),
            ])
            .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr.scratch, 5.0);
        assert_eq!(cfg.model.backbone.n_layers, 2);
        assert_eq!(cfg.data.identities, vec![9, 10]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::default().with_overrides([("KINELIFT_TRAIN__NOPE", "1")]).unwrap_err();
        assert_eq!(e.code(), "E_CONFIG");
        assert_eq!(RunConfig::from_toml_str("[train]\nbogus = 1\n").unwrap_err().code(), "E_CONFIG");
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let t = TrainConfig::default();
        assert!(t.lr_factor(1, 100) < 0.1);
        assert!((t.lr_factor(50, 1000) - t.lr_factor(49, 1000)).abs() < 0.05);
        assert!((t.lr_factor(100, 100) - t.min_lr_fraction).abs() < 1e-12);
    }
}
