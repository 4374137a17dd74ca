//! The full lifting model: autoencoder, conditioning modules and backbone
//! sharing one parameter store.

use kinelift_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DiT, BACKBONE_GROUP};
use crate::conditioning::{ConditionConfig, ConditionTokens, Conditioner, DrivingSequence, ReferenceSet, TokenBlock, IDENTITY_FACTOR};
use crate::encoders::{EncoderConfig, ImageAutoencoder, LATENT_CHANNELS, SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crate::error::{Error, Result};
use crate::nn::ParamBuilder;
use crate::seeds::derive_seed;

pub const AUTOENCODER_GROUP: &str = "autoencoder";
pub const SCRATCH_GROUP: &str = "scratch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square frame size in pixels.
    pub resolution: usize,
    pub expression_dim: usize,
    pub init_seed: u64,
    pub encoder: EncoderConfig,
    pub conditioning: ConditionConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            expression_dim: crate::kinematics::DEFAULT_EXPRESSION_DIM,
            init_seed: 0,
            encoder: EncoderConfig::default(),
            conditioning: ConditionConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        if self.expression_dim == 0 {
            return Err(Error::Config("expression_dim must be positive".into()));
        }
        let r = self.resolution;
        if r == 0 || r % IDENTITY_FACTOR != 0 {
            return Err(Error::Config(format!("resolution must be a positive multiple of {IDENTITY_FACTOR}, got {r}")));
        }
        if (r / SPATIAL_FACTOR) % self.backbone.patch != 0 {
            return Err(Error::Config(format!(
                "latent grid {} is not divisible by patch size {}",
                r / SPATIAL_FACTOR,
                self.backbone.patch
            )));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.resolution / SPATIAL_FACTOR
    }
}

/// Model plus parameters. `latent_scale` multiplies raw autoencoder latents so
/// the diffusion targets have roughly unit variance.
#[derive(Debug, Clone)]
pub struct LiftModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub autoencoder: ImageAutoencoder,
    pub conditioner: Conditioner,
    pub dit: DiT,
    pub latent_scale: f64,
}

/// Frames per autoencoder call when encoding long stacks.
const ENCODE_CHUNK: usize = 16;

impl<T: Scalar> LiftModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.init_seed;
        let autoencoder =
            ImageAutoencoder::new(&mut ParamBuilder::new(&mut store, seed, "autoencoder", AUTOENCODER_GROUP), &config.encoder);
        let b = &config.backbone;
        let conditioner = Conditioner::new(
            &mut ParamBuilder::new(&mut store, seed, "conditioning", SCRATCH_GROUP),
            &config.conditioning,
            &config.encoder,
            config.expression_dim,
            b.d_model,
            b.d_ctx,
            b.patch,
            (config.resolution, config.resolution),
        );
        let mut dit = DiT::new(&mut ParamBuilder::new(&mut store, seed, "backbone", BACKBONE_GROUP), b)?;
        if b.adapter_rank > 0 {
            let scale = b.resolved_adapter_scale(b.adapter_rank);
            dit.attach_adapters(&mut store, b.adapter_rank, scale, derive_seed(seed, "lora"), false)?;
        }
        Ok(LiftModel { config, store, autoencoder, conditioner, dit, latent_scale: 1.0 })
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        let ids: Vec<_> = self.store.iter().filter(|(_, e)| e.group == group).map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, trainable);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    fn check_frames(&self, images: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("expected frames [B, 3, {r}, {r}], got {s:?}")));
        }
        Ok(())
    }

    /// Raw (unscaled) autoencoder latents of `[B, 3, H, W]` frames.
    pub fn encode_raw(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames(images)?;
        let b = images.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let n = ENCODE_CHUNK.min(b - start);
            let chunk = images.narrow(0, start, n);
            parts.push(self.autoencoder.encode_image(&self.store, &chunk)?.values);
            start += n;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    /// Scaled latents, the space diffusion runs in.
    pub fn encode_latents(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = T::lit(self.latent_scale);
        Ok(self.encode_raw(images)?.map(|v| v * s))
    }

    /// Scaled latents `[B, 16, h, w]` back to frames `[B, 3, H, W]`.
    pub fn decode_latents(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let inv = T::lit(1.0 / self.latent_scale);
        self.autoencoder.decode_latent(&self.store, &latents.map(|v| v * inv))
    }

    /// Frames that drive latent frame `t` of the video: source frame `4t`.
    pub fn keyframes(n: usize) -> Vec<usize> {
        (0..n / TEMPORAL_FACTOR).map(|t| t * TEMPORAL_FACTOR).collect()
    }

    /// Target video latents `[N/4, 16, h, w]` from a driving sequence's target video.
    pub fn target_latents(&self, drv: &DrivingSequence<T>) -> Result<Tensor<T>> {
        let target = drv.target.as_ref().ok_or(Error::MissingTarget)?;
        let frames = select_frames(target, &Self::keyframes(drv.len()));
        self.encode_latents(&frames)
    }

    /// Condition tokens in `g`. `ref_latents` are the scaled image latents of the reference images.
    pub fn condition_graph(
        &self,
        g: &mut Graph<T>,
        refs: &ReferenceSet<T>,
        ref_latents: &Tensor<T>,
        drv: &DrivingSequence<T>,
    ) -> Result<(TokenBlock, TokenBlock, Option<Var>)> {
        let (h, w) = refs.resolution();
        if (h, w) != (drv.shading.dim(2), drv.shading.dim(3)) {
            return Err(Error::Shape("reference and driving resolutions differ".into()));
        }
        let cfg = &self.conditioner.cfg;
        let d = self.config.backbone.d_model;
        let x_ref = if cfg.use_reference_tokens {
            let lat = g.input(ref_latents.clone());
            let sh = g.input(refs.shading.clone());
            let co = g.input(refs.coeffs.clone());
            self.conditioner.build_reference_tokens(g, &self.store, lat, sh, co)?
        } else {
            TokenBlock { value: g.input(Tensor::zeros(&[0, d])), positions: Vec::new() }
        };
        let sh = g.input(drv.shading.clone());
        let co = g.input(drv.coeffs.clone());
        let x_drv = self.conditioner.build_driving_tokens(g, &self.store, sh, co)?;
        let ctx = if cfg.use_identity_context {
            let im = g.input(refs.images.clone());
            Some(self.conditioner.build_identity_context(g, &self.store, im)?)
        } else {
            None
        };
        Ok((x_ref, x_drv, ctx))
    }

    /// Evaluated condition tokens, for reuse across sampler steps.
    pub fn condition_tokens(
        &self,
        refs: &ReferenceSet<T>,
        ref_latents: &Tensor<T>,
        drv: &DrivingSequence<T>,
    ) -> Result<ConditionTokens<T>> {
        let mut g = Graph::new();
        let (r, d, c) = self.condition_graph(&mut g, refs, ref_latents, drv)?;
        Ok(ConditionTokens {
            x_ref: g.value(r.value).clone(),
            ref_positions: r.positions,
            x_drv: g.value(d.value).clone(),
            drv_positions: d.positions,
            identity_context: c.map(|c| g.value(c).clone()),
        })
    }

    /// Predicted velocity grid `[T, 16, h, w]` for video latents `xt`.
    pub fn velocity_graph(
        &self,
        g: &mut Graph<T>,
        x_ref: &TokenBlock,
        x_drv: &TokenBlock,
        context: Option<Var>,
        xt: &Tensor<T>,
        t: f64,
    ) -> Result<Var> {
        let s = xt.shape();
        let l = self.config.latent_size();
        if s.len() != 4 || s[1] != LATENT_CHANNELS || s[2] != l || s[3] != l {
            return Err(Error::Shape(format!("video latents must be [T, {LATENT_CHANNELS}, {l}, {l}], got {s:?}")));
        }
        let x = g.input(xt.clone());
        let video = self.dit.embed_video(g, &self.store, x)?;
        let seq = crate::conditioning::assemble_sequence(g, x_ref, x_drv, &video)?;
        let tokens = self.dit.forward(g, &self.store, &seq, t, context)?;
        self.dit.unpatchify_velocity(g, tokens, s[0], l, l)
    }

    pub fn predict_velocity(&self, cond: &ConditionTokens<T>, xt: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (r, d, c) = cond.to_graph(&mut g);
        let v = self.velocity_graph(&mut g, &r, &d, c, xt, t)?;
        Ok(g.value(v).clone())
    }
}

/// Frames `idx` of a `[3, N, H, W]` clip as a `[len, 3, H, W]` stack.
pub fn select_frames<T: Scalar>(clip: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| clip.narrow(1, i, 1).permute(&[1, 0, 2, 3])).collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}
