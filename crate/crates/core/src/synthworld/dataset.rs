//! Aligned (appearance, shading, coefficient) frame sequences and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, and per sequence a coefficient
//! CSV plus one appearance PNG and one shading PNG per frame. The manifest is
//! the contract read by training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::proxy::{deform_mesh, make_head_proxy_with, HeadProxy, ProxyOptions};
use super::render::{phong_shade, render_appearance, Camera, PhongMaterial};
use super::trajectory::{sample_trajectory_with, TrajectoryStyle};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kinematics::{ExpressionCoeff, ExpressionTrajectory};
use crate::seeds::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "kinelift-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub appearance: Image,
    pub shading: Image,
    pub coeff: ExpressionCoeff<f64>,
}

/// Render one frame; both images are snapped to 8-bit levels.
pub fn render_frame(
    proxy: &HeadProxy,
    camera: &Camera,
    material: &PhongMaterial,
    coeff: &ExpressionCoeff<f64>,
) -> Result<FrameBundle> {
    let mesh = deform_mesh(proxy, coeff)?;
    Ok(FrameBundle {
        appearance: render_appearance(proxy, &mesh, camera, material)?.quantized(),
        shading: phong_shade(&mesh, camera, material)?.quantized(),
        coeff: coeff.clone(),
    })
}

/// One bundle sequence per trajectory.
pub fn synth_dataset(
    proxy: &HeadProxy,
    trajectories: &[ExpressionTrajectory<f64>],
    camera: &Camera,
    material: &PhongMaterial,
) -> Result<Vec<Vec<FrameBundle>>> {
    trajectories
        .iter()
        .map(|t| t.coeffs().iter().map(|c| render_frame(proxy, camera, material, c)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub appearance: String,
    pub shading: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub identity_seed: u64,
    pub trajectory_seed: u64,
    pub richness: usize,
    pub mode_scale: f64,
    /// Kept out of training; used for evaluation only.
    #[serde(default)]
    pub holdout: bool,
    pub coeffs: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub world_seed: u64,
    pub camera: Camera,
    pub material: PhongMaterial,
    pub proxy: ProxyOptions,
    pub trajectory_style: TrajectoryStyle,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub entry: SequenceEntry,
    pub trajectory: ExpressionTrajectory<f64>,
    pub frames: Vec<FrameBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<Sequence>,
}

/// What to synthesize: identities × trajectories, each of the given length and richness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub world_seed: u64,
    pub identities: Vec<u64>,
    pub trajectories_per_identity: usize,
    pub length: usize,
    pub richness: usize,
    pub resolution: usize,
    pub camera_distance: f64,
    pub proxy: ProxyOptions,
    pub material: PhongMaterial,
    pub style: TrajectoryStyle,
    /// The last this-many trajectories of every identity are marked held out.
    #[serde(default)]
    pub holdout_trajectories: usize,
    /// Richness of held-out trajectories when it differs from `richness`.
    #[serde(default)]
    pub holdout_richness: Option<usize>,
}

impl DatasetSpec {
    pub fn camera(&self) -> Camera {
        Camera::frontal(self.resolution, self.resolution, self.camera_distance)
    }
}

/// Trajectory seed for sequence `k` of `identity`.
pub fn trajectory_seed(world_seed: u64, identity: u64, k: usize) -> u64 {
    derive_seed(world_seed, &format!("trajectory/{identity}/{k}"))
}

impl Dataset {
    /// Render everything described by `spec` in memory.
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        if spec.trajectories_per_identity == 0 || spec.identities.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one identity and one trajectory".into()));
        }
        let camera = spec.camera();
        let mut sequences = Vec::new();
        for &identity in &spec.identities {
            let proxy = make_head_proxy_with(identity, spec.proxy)?;
            for k in 0..spec.trajectories_per_identity {
                let tseed = trajectory_seed(spec.world_seed, identity, k);
                let holdout = k + spec.holdout_trajectories >= spec.trajectories_per_identity;
                let richness = if holdout { spec.holdout_richness.unwrap_or(spec.richness) } else { spec.richness };
                let sampled =
                    sample_trajectory_with(tseed, spec.length, richness, spec.proxy.expression_dim, &spec.style)?;
                let name = format!("id{identity}_t{k}");
                let frames: Vec<FrameBundle> = sampled
                    .trajectory
                    .coeffs()
                    .iter()
                    .map(|c| render_frame(&proxy, &camera, &spec.material, c))
                    .collect::<Result<_>>()?;
                let entry = SequenceEntry {
                    coeffs: format!("{name}/coeffs.csv"),
                    frames: (0..frames.len())
                        .map(|i| FrameEntry {
                            appearance: format!("{name}/appearance_{i:04}.png"),
                            shading: format!("{name}/shading_{i:04}.png"),
                        })
                        .collect(),
                    name,
                    identity_seed: identity,
                    trajectory_seed: tseed,
                    richness,
                    mode_scale: spec.style.mode_scale,
                    holdout,
                };
                sequences.push(Sequence { entry, trajectory: sampled.trajectory, frames });
            }
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                world_seed: spec.world_seed,
                camera,
                material: spec.material.clone(),
                proxy: spec.proxy,
                trajectory_style: spec.style,
                sequences: sequences.iter().map(|s| s.entry.clone()).collect(),
            },
            sequences,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn sequence(&self, name: &str) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.entry.name == name)
    }

    pub fn identities(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.sequences.iter().map(|s| s.entry.identity_seed).collect();
        ids.dedup();
        ids
    }

    pub fn proxy_for(&self, identity: u64) -> Result<HeadProxy> {
        make_head_proxy_with(identity, self.manifest.proxy)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for s in &self.sequences {
            let dir = root.join(&s.entry.name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let csv_path = root.join(&s.entry.coeffs);
            fs::write(&csv_path, s.trajectory.to_csv(true)).map_err(|e| Error::io(&csv_path, e))?;
            for (frame, files) in s.frames.iter().zip(&s.entry.frames) {
                frame.appearance.write_png(&root.join(&files.appearance))?;
                frame.shading.write_png(&root.join(&files.shading))?;
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest = read_manifest(root)?;
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for entry in &manifest.sequences {
            let csv_path = root.join(&entry.coeffs);
            let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            let trajectory = ExpressionTrajectory::from_csv(&text, manifest.trajectory_style.frame_rate)?;
            if trajectory.len() != entry.frames.len() {
                return Err(Error::Format(format!(
                    "sequence {}: {} coefficient rows but {} frames",
                    entry.name,
                    trajectory.len(),
                    entry.frames.len()
                )));
            }
            let frames = entry
                .frames
                .iter()
                .zip(trajectory.coeffs())
                .map(|(f, c)| {
                    Ok(FrameBundle {
                        appearance: Image::read_png(&root.join(&f.appearance))?,
                        shading: Image::read_png(&root.join(&f.shading))?,
                        coeff: c.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(Sequence { entry: entry.clone(), trajectory, frames });
        }
        Ok(Dataset { manifest, sequences })
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Every file path the manifest references, relative paths resolved against `root`.
pub fn manifest_files(root: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for s in &manifest.sequences {
        out.push(root.join(&s.coeffs));
        for f in &s.frames {
            out.push(root.join(&f.appearance));
            out.push(root.join(&f.shading));
        }
    }
    out
}
