//! Binary checkpoints: an 8-byte magic, a little-endian header length, a JSON
//! header, then raw little-endian parameter and optimizer blobs.
//!
//! Round trips are bit exact, so a resumed run continues exactly where the
//! saved one stopped.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use kinelift_autograd::{AdamW, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LiftModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"KLFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Progress counters and seeds that travel with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub autoencoder_step: u64,
    pub diffusion_step: u64,
    /// Set once the autoencoder stage has finished and the latent scale is final.
    #[serde(default)]
    pub latent_scale_fixed: bool,
    pub seeds: BTreeMap<String, u64>,
    /// Loss on the fixed validation probe at save time.
    pub validation_loss: Option<f64>,
    /// Free-form run description (usually the run config).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: String,
    shape: Vec<usize>,
    trainable: bool,
    data: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentRecord {
    param: String,
    m: BlobRef,
    v: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerRecord {
    name: String,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    moments: Vec<MomentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    latent_scale: f64,
    adapters_merged: bool,
    state: TrainState,
    params: Vec<ParamRecord>,
    optimizers: Vec<OptimizerRecord>,
}

/// A loaded checkpoint: model, named optimizers and training state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: LiftModel<T>,
    pub optimizers: BTreeMap<String, AdamW<T>>,
    pub state: TrainState,
}

struct BlobWriter<T> {
    bytes: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> BlobWriter<T> {
    fn push(&mut self, values: &[T]) -> BlobRef {
        let offset = self.bytes.len() as u64;
        for &v in values {
            v.write_le(&mut self.bytes);
        }
        BlobRef { offset, len: values.len() as u64 }
    }
}

fn read_blob<T: Scalar>(body: &[u8], r: &BlobRef) -> Result<Vec<T>> {
    let size = T::DTYPE.size();
    let start = r.offset as usize;
    let end = start + r.len as usize * size;
    if end > body.len() {
        return Err(Error::Checkpoint(format!("blob [{start}, {end}) exceeds payload of {} bytes", body.len())));
    }
    Ok(body[start..end].chunks_exact(size).map(T::read_le).collect())
}

/// Serialize `model`, `optimizers` and `state` to `path` (written via a temporary file and renamed).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &LiftModel<T>,
    optimizers: &[(&str, &AdamW<T>)],
    state: &TrainState,
) -> Result<()> {
    let mut blobs = BlobWriter::<T> { bytes: Vec::new(), _t: std::marker::PhantomData };
    let mut params = Vec::new();
    for (_, e) in model.store.iter() {
        params.push(ParamRecord {
            name: e.name.clone(),
            group: e.group.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
            data: blobs.push(e.value.data()),
        });
    }
    let mut opt_records = Vec::new();
    for (name, opt) in optimizers {
        let mut moments: Vec<(String, &[T], &[T])> = opt
            .moments()
            .filter(|(id, _, _)| model.store.contains(*id))
            .map(|(id, m, v)| (model.store.entry(id).name.clone(), m, v))
            .collect();
        moments.sort_by(|a, b| a.0.cmp(&b.0));
        let moments = moments
            .into_iter()
            .map(|(param, m, v)| MomentRecord { param, m: blobs.push(m), v: blobs.push(v) })
            .collect();
        opt_records.push(OptimizerRecord {
            name: name.to_string(),
            step: opt.steps_taken(),
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            moments,
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.name().to_string(),
        model: model.config.clone(),
        latent_scale: model.latent_scale,
        adapters_merged: model.config.backbone.adapter_rank > 0 && !model.dit.has_adapters(),
        state: state.clone(),
        params,
        optimizers: opt_records,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blobs.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs.bytes);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + n > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + n]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
    }
    Ok((header, &bytes[16 + n..]))
}

/// Model configuration and training state without materializing weights.
pub fn peek_checkpoint(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, _) = parse_header(&bytes)?;
    Ok((h.model, h.state))
}

/// Element type name (`"f32"` or `"f64"`) of the stored weights.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, _) = parse_header(&bytes)?;
    Ok(h.dtype)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = parse_header(&bytes)?;
    if header.dtype != T::DTYPE.name() {
        return Err(Error::Checkpoint(format!("checkpoint holds {} weights, requested {}", header.dtype, T::DTYPE.name())));
    }
    let mut model = LiftModel::<T>::new(header.model.clone())?;
    if header.adapters_merged {
        model.dit.merge_adapters(&mut model.store);
    }
    let expected = model.store.len();
    if expected != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {expected}",
            header.params.len()
        )));
    }
    for rec in &header.params {
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", rec.name)))?;
        let e = model.store.entry_mut(id);
        if e.value.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                rec.name,
                e.value.shape(),
                rec.shape
            )));
        }
        e.value = Tensor::from_vec(&rec.shape, read_blob(body, &rec.data)?)?;
        e.group = rec.group.clone();
        e.trainable = rec.trainable;
    }
    model.latent_scale = header.latent_scale;

    let mut optimizers = BTreeMap::new();
    for o in &header.optimizers {
        let mut opt = AdamW::new(o.beta1, o.beta2, o.eps, o.weight_decay);
        let mut moments = Vec::new();
        for m in &o.moments {
            let id = model
                .store
                .find(&m.param)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {}", m.param)))?;
            moments.push((id, read_blob(body, &m.m)?, read_blob(body, &m.v)?));
        }
        opt.restore(o.step, moments);
        optimizers.insert(o.name.clone(), opt);
    }
    Ok(Checkpoint { model, optimizers, state: header.state })
}
