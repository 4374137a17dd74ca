//! Commands behind the `kinelift` binary.
//!
//! Each command writes into an output directory and appends one JSON line
//! describing the invocation to `run.meta` there.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kinelift::checkpoint::{checkpoint_dtype, load_checkpoint, peek_checkpoint};
use kinelift::config::RunConfig;
use kinelift::image::Image;
use kinelift::kinematics::ExpressionTrajectory;
use kinelift::metrics::{evaluate_frames, MetricsReport};
use kinelift::pipeline::*;
use kinelift::synthworld::{render_frame, Dataset};
use kinelift::{Error, Result};
use kinelift_autograd::{Scalar, Tensor};
use serde::Serialize;

pub const META_FILE: &str = "run.meta";
pub const LIFT_MANIFEST: &str = "lift.json";
pub const FRAMES_DIR: &str = "frames";
pub const TARGET_DIR: &str = "target";

#[derive(Parser, Debug)]
#[command(name = "kinelift", version, about = "Lift reference images of a head into new expressions with a conditioned video diffusion model")]
#[command(after_help = "Configuration values can be overridden with KINELIFT_<SECTION>__<KEY>=<value>, e.g. KINELIFT_TRAIN__STEPS=100.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset of appearance frames, shading maps and coefficients.
    SynthData(SynthArgs),
    /// Pick reference frames for every sequence by K-means over its coefficients.
    SelectRefs(SelectArgs),
    /// Pre-train the autoencoder, then train the diffusion model.
    Train(TrainArgs),
    /// Generate frames that follow a driving trajectory.
    Lift(LiftArgs),
    /// Score generated frames against reference frames (PSNR, SSIM).
    Eval(EvalArgs),
    /// Train and evaluate the variants along one ablation axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// TOML run configuration; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// References per sequence.
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    /// Manifest path; defaults to `<data>/references.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Reference manifest; defaults to `<data>/references.json`.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training seed (noise, timesteps, batches).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total diffusion steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many diffusion steps.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
}

#[derive(Args, Debug)]
pub struct LiftArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Dataset sequence supplying shading maps and coefficients.
    #[arg(long, conflicts_with = "drive_coeffs")]
    pub drive: Option<String>,
    /// Coefficient CSV to drive with; shading is read from `--shading-dir` or rendered.
    #[arg(long)]
    pub drive_coeffs: Option<PathBuf>,
    /// Directory of shading PNGs aligned with `--drive-coeffs`.
    #[arg(long, requires = "drive_coeffs")]
    pub shading_dir: Option<PathBuf>,
    /// Identity seed to take references from (and to render shading for).
    #[arg(long)]
    pub identity: Option<u64>,
    /// Sequence whose selected frames serve as references.
    #[arg(long)]
    pub reference_seq: Option<String>,
    /// Euler steps; defaults to the configured value.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampling seed; defaults to the configured inference seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per generation window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Write the report as JSON here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// exp-injection, ref-count or richness.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated seeds shared by every variant.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a),
        Command::SelectRefs(a) => select_refs(&a),
        Command::Train(a) => train(&a),
        Command::Lift(a) => lift(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate_cmd(&a),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Append one provenance record to `dir/run.meta`.
pub fn write_meta(dir: &Path, command: &str, details: serde_json::Value) -> Result<()> {
    create_dir(dir)?;
    let unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let record = serde_json::json!({
        "tool": "kinelift",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "unix_time": unix,
        "details": details,
    });
    let path = dir.join(META_FILE);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{record}").map_err(|e| Error::io(&path, e))
}

fn to_json<S: Serialize>(v: &S) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn refs_path(data: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| data.join(REFERENCES_FILE))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds.world = s;
    }
    let dataset = Dataset::generate(&cfg.dataset_spec())?;
    dataset.save(&a.out)?;
    println!("wrote {} sequences, {} frames to {}", dataset.sequences.len(), dataset.frame_count(), a.out.display());
    write_meta(&a.out, "synth-data", serde_json::json!({ "config": to_json(&cfg)?, "frames": dataset.frame_count() }))
}

fn select_refs(a: &SelectArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let manifest = ReferenceManifest::select(&dataset, a.k)?;
    let out = refs_path(&a.data, &a.out);
    manifest.save(&out)?;
    for (name, c) in &manifest.sequences {
        println!("{name}: frames {:?} mean_distance {:.6} max_distance {:.6}", c.indices, c.mean_distance, c.max_distance);
    }
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_meta(dir, "select-refs", serde_json::json!({ "k": a.k, "manifest": out }))
}

fn print_line(l: &MetricsLine) {
    let val = l.validation_loss.map(|v| format!(" val {v:.6}")).unwrap_or_default();
    println!("{} step {} loss {:.6} grad_norm {:.4} lr_scale {:.4}{val}", l.stage, l.step, l.loss, l.grad_norm, l.lr_scale);
}

fn train(a: &TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let refs = ReferenceManifest::load(&refs_path(&a.data, &a.refs))?;
    create_dir(&a.out)?;
    if let Some(ck) = &a.resume {
        if a.seed.is_some() {
            return Err(Error::InvalidArgument("--seed cannot change a resumed run; seeds come from the checkpoint".into()));
        }
        if let Some(path) = &a.config {
            let cfg = RunConfig::load(Some(path))?;
            let (model, _) = peek_checkpoint(ck)?;
            if model != cfg.model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config than {}", ck.display(), path.display())));
            }
        }
        return match checkpoint_dtype(ck)?.as_str() {
            "f64" => resume::<f64>(a, ck, &dataset, refs),
            _ => resume::<f32>(a, ck, &dataset, refs),
        };
    }
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds.train = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    match a.dtype {
        Dtype::F32 => fresh::<f32>(a, cfg, &dataset, refs),
        Dtype::F64 => fresh::<f64>(a, cfg, &dataset, refs),
    }
}

fn fresh<T: Scalar>(a: &TrainArgs, cfg: RunConfig, dataset: &Dataset, refs: ReferenceManifest) -> Result<()> {
    write_meta(&a.out, "train", serde_json::json!({ "config": to_json(&cfg)?, "dtype": T::DTYPE.name() }))?;
    let mut tr = Trainer::<T>::new(cfg, dataset, refs)?;
    finish(a, &mut tr)
}

fn resume<T: Scalar>(a: &TrainArgs, ck: &Path, dataset: &Dataset, refs: ReferenceManifest) -> Result<()> {
    let mut tr = Trainer::resume(load_checkpoint::<T>(ck)?, dataset, refs, a.steps)?;
    write_meta(&a.out, "train", serde_json::json!({ "resumed_from": ck, "diffusion_step": tr.state.diffusion_step, "config": to_json(&tr.cfg)? }))?;
    finish(a, &mut tr)
}

fn finish<T: Scalar>(a: &TrainArgs, tr: &mut Trainer<T>) -> Result<()> {
    println!("parameters {}", tr.model.parameter_count());
    tr.run(Some(&a.out), a.stop_at, print_line)?;
    let val = tr.state.validation_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
    println!("stopped at diffusion step {} validation_loss {val}", tr.state.diffusion_step);
    Ok(())
}

/// Driving inputs resolved to tensors, with ground-truth frames when they are known.
struct Drive<T> {
    label: String,
    identity: Option<u64>,
    shading: Tensor<T>,
    coeffs: Tensor<T>,
    truth: Option<Vec<Image>>,
}

fn read_png_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    files.iter().map(|p| Image::read_png(p)).collect()
}

fn drive_inputs<T: Scalar>(a: &LiftArgs, dataset: &Dataset) -> Result<Drive<T>> {
    if let Some(name) = &a.drive {
        let s = dataset.sequence(name).ok_or_else(|| Error::InvalidArgument(format!("no sequence {name} in the dataset")))?;
        let t = SequenceTensors::<T>::from_sequence(s);
        return Ok(Drive { label: name.clone(), identity: Some(t.identity), shading: t.shading, coeffs: t.coeffs, truth: Some(t.appearance) });
    }
    let Some(csv) = &a.drive_coeffs else {
        return Err(Error::InvalidArgument("give a driving sequence with --drive or --drive-coeffs".into()));
    };
    let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let traj = ExpressionTrajectory::from_csv(&text, dataset.manifest.trajectory_style.frame_rate)?;
    let coeffs = coefficient_tensor::<T>(&traj);
    let identity = a.identity.or_else(|| a.reference_seq.as_ref().and_then(|r| dataset.sequence(r)).map(|s| s.entry.identity_seed));
    if let Some(dir) = &a.shading_dir {
        let maps = read_png_dir(dir)?;
        if maps.len() != traj.len() {
            return Err(Error::Shape(format!("{} shading maps for {} coefficient rows", maps.len(), traj.len())));
        }
        return Ok(Drive { label: csv.display().to_string(), identity, shading: stack_images(&maps), coeffs, truth: None });
    }
    let id = identity
        .filter(|id| dataset.identities().contains(id))
        .ok_or_else(|| Error::InvalidArgument("no shading maps given and no head proxy for the driving identity (pass --shading-dir or --identity)".into()))?;
    let proxy = dataset.proxy_for(id)?;
    let frames = traj
        .coeffs()
        .iter()
        .map(|c| render_frame(&proxy, &dataset.manifest.camera, &dataset.manifest.material, c))
        .collect::<Result<Vec<_>>>()?;
    let shading = stack_images(frames.iter().map(|f| &f.shading));
    let truth = frames.into_iter().map(|f| f.appearance).collect();
    Ok(Drive { label: csv.display().to_string(), identity: Some(id), shading, coeffs, truth: Some(truth) })
}

#[derive(Debug, Serialize)]
struct LiftRecord {
    checkpoint: PathBuf,
    driving: String,
    reference_sequence: String,
    reference_frames: Vec<usize>,
    steps: usize,
    seed: u64,
    window: usize,
    /// Driving frame index of each output frame.
    source_frames: Vec<usize>,
    frames: Vec<String>,
    targets: Option<Vec<String>>,
}

fn lift(a: &LiftArgs) -> Result<()> {
    match checkpoint_dtype(&a.checkpoint)?.as_str() {
        "f64" => lift_with::<f64>(a),
        _ => lift_with::<f32>(a),
    }
}

fn lift_with<T: Scalar>(a: &LiftArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let refs = ReferenceManifest::load(&refs_path(&a.data, &a.refs))?;
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(ck.state.run.clone()).unwrap_or_default();
    let drive = drive_inputs::<T>(a, &dataset)?;

    let ref_name = match &a.reference_seq {
        Some(r) => r.clone(),
        None => {
            let id = a.identity.or(drive.identity).ok_or_else(|| Error::InvalidArgument("pass --reference-seq or --identity".into()))?;
            dataset
                .sequences
                .iter()
                .find(|s| s.entry.identity_seed == id && !s.entry.holdout)
                .map(|s| s.entry.name.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("identity {id} has no training sequence to take references from")))?
        }
    };
    let seq = dataset.sequence(&ref_name).ok_or_else(|| Error::InvalidArgument(format!("no sequence {ref_name} in the dataset")))?;
    let idx = refs.indices(&ref_name)?.to_vec();
    let set = SequenceTensors::<T>::from_sequence(seq).references(&idx)?;

    let steps = a.steps.unwrap_or(cfg.flow.sample_steps);
    let seed = a.seed.unwrap_or(cfg.seeds.inference);
    let window = a.window.unwrap_or(cfg.train.driving_frames);
    let out = lift_sequence(&ck.model, &set, &drive.shading, &drive.coeffs, window, steps, seed)?;

    let frames_dir = a.out.join(FRAMES_DIR);
    create_dir(&frames_dir)?;
    let mut frames = Vec::new();
    for (i, im) in out.frames.iter().enumerate() {
        let rel = format!("{FRAMES_DIR}/frame_{i:04}.png");
        im.write_png(&a.out.join(&rel))?;
        frames.push(rel);
    }
    let targets = match &drive.truth {
        Some(truth) => {
            create_dir(&a.out.join(TARGET_DIR))?;
            let mut names = Vec::new();
            for (i, &f) in out.source_frames.iter().enumerate() {
                let rel = format!("{TARGET_DIR}/frame_{i:04}.png");
                truth[f].write_png(&a.out.join(&rel))?;
                names.push(rel);
            }
            Some(names)
        }
        None => None,
    };
    let record = LiftRecord {
        checkpoint: a.checkpoint.clone(),
        driving: drive.label,
        reference_sequence: ref_name,
        reference_frames: idx,
        steps,
        seed,
        window,
        source_frames: out.source_frames,
        frames,
        targets,
    };
    write_json(&a.out.join(LIFT_MANIFEST), &record)?;
    println!("wrote {} frames to {}", record.frames.len(), a.out.join(FRAMES_DIR).display());
    write_meta(&a.out, "lift", to_json(&record)?)
}

/// Score the PNGs of two directories, paired in file-name order.
pub fn eval_dirs(generated: &Path, reference: &Path) -> Result<MetricsReport> {
    evaluate_frames(&read_png_dir(generated)?, &read_png_dir(reference)?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let report = eval_dirs(&a.generated, &a.reference)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let axis = AblationAxis::parse(&a.axis)?;
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::InvalidArgument(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    create_dir(&a.out)?;
    write_meta(&a.out, "ablate", serde_json::json!({ "axis": axis.name(), "seeds": seeds, "config": to_json(&cfg)? }))?;
    let report = match a.dtype {
        Dtype::F32 => ablate::<f32>(&cfg, axis, &seeds, |m| println!("{m}"))?,
        Dtype::F64 => ablate::<f64>(&cfg, axis, &seeds, |m| println!("{m}"))?,
    };
    let table = report.to_table();
    print!("{table}");
    let p = a.out.join("report.tsv");
    fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    write_json(&a.out.join("report.json"), &report)
}
