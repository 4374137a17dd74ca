//! Condition encoders: a volumetric encoder for driving shading clips, a planar
//! encoder for reference shading maps, per-role expression embeddings, and a
//! small deterministic image autoencoder used as the latent space.

use kinelift_autograd::{ConvGeom, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Linear, ParamBuilder};

pub const LATENT_CHANNELS: usize = 16;
pub const SPATIAL_FACTOR: usize = 8;
pub const TEMPORAL_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    /// Width of the first layer of both shading encoders; doubled at each downsampling stage.
    pub base_width: usize,
    pub autoencoder_width: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            latent_channels: LATENT_CHANNELS,
            spatial_factor: SPATIAL_FACTOR,
            temporal_factor: TEMPORAL_FACTOR,
            base_width: 32,
            autoencoder_width: 32,
            activation: Activation::Silu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.spatial_factor.is_power_of_two() || !self.temporal_factor.is_power_of_two() {
            return Err(Error::Config("spatial_factor and temporal_factor must be powers of two".into()));
        }
        if self.spatial_factor != SPATIAL_FACTOR || self.temporal_factor != TEMPORAL_FACTOR {
            return Err(Error::Config(format!(
                "the encoder layer plans realize {SPATIAL_FACTOR}x spatial and {TEMPORAL_FACTOR}x temporal compression, \
                 got {}x and {}x",
                self.spatial_factor, self.temporal_factor
            )));
        }
        if self.latent_channels != LATENT_CHANNELS {
            return Err(Error::Config(format!("latent_channels must be {LATENT_CHANNELS}")));
        }
        if self.in_channels != 3 {
            return Err(Error::Config("in_channels must be 3".into()));
        }
        if self.base_width == 0 || self.autoencoder_width == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Where a latent grid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentKind {
    ReferenceShading,
    DrivenShading,
    Video,
}

/// Encoder output with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub values: Tensor<T>,
    pub kind: LatentKind,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(values: Tensor<T>, kind: LatentKind) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite(format!("{kind:?} latent")));
        }
        Ok(LatentGrid { values, kind })
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "height and width must be positive multiples of {SPATIAL_FACTOR}, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_temporal(f: usize) -> Result<()> {
    if f == 0 || f % TEMPORAL_FACTOR != 0 {
        return Err(Error::Shape(format!("frame count must be a positive multiple of {TEMPORAL_FACTOR}, got {f}")));
    }
    Ok(())
}

fn check_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank || shape[1] != 3 {
        return Err(Error::Shape(format!("{what} expects a rank-{rank} tensor with 3 channels, got {shape:?}")));
    }
    Ok(())
}

/// Replicate the first and last frames once along the depth axis of `[B, C, D, H, W]`.
fn pad_time_replicate<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let d = g.shape(x)[2];
    let first = g.narrow(x, 2, 0, 1);
    let last = g.narrow(x, 2, d - 1, 1);
    g.concat(&[first, x, last], 2)
}

/// Seven volumetric convolutions; time is padded by edge replication so a
/// clip that is constant in time stays constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivenShadingEncoder {
    layers: Vec<ConvLayer>,
}

impl DrivenShadingEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Self {
        let w = cfg.base_width;
        let plan: [(usize, usize, [usize; 3]); 7] = [
            (3, w, [1, 1, 1]),
            (w, w, [1, 2, 2]),
            (w, 2 * w, [2, 2, 2]),
            (2 * w, 2 * w, [1, 1, 1]),
            (2 * w, 4 * w, [2, 2, 2]),
            (4 * w, 4 * w, [1, 1, 1]),
            (4 * w, LATENT_CHANNELS, [1, 1, 1]),
        ];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| ConvLayer::new(pb, &format!("conv{i}"), ci, co, ConvGeom::new([3; 3], s, [0, 1, 1])))
            .collect();
        DrivenShadingEncoder { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// `[B, 3, F, H, W] -> [B, 16, F/4, H/8, W/8]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, maps: Var) -> Result<Var> {
        let s = g.shape(maps).to_vec();
        check_rank(&s, 5, "driven shading encoder")?;
        check_temporal(s[2])?;
        check_spatial(s[3], s[4])?;
        let mut x = maps;
        for (i, layer) in self.layers.iter().enumerate() {
            let padded = pad_time_replicate(g, x);
            x = layer.forward(g, ps, padded);
            if i + 1 < self.layers.len() {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    pub fn encode<T: Scalar>(&self, ps: &ParamStore<T>, maps: &Tensor<T>) -> Result<LatentGrid<T>> {
        let mut g = Graph::new();
        let x = g.input(maps.clone());
        let y = self.forward(&mut g, ps, x)?;
        LatentGrid::new(g.value(y).clone(), LatentKind::DrivenShading)
    }
}

/// Six planar convolutions, three of them with stride 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceShadingEncoder {
    layers: Vec<ConvLayer>,
}

impl ReferenceShadingEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Self {
        let w = cfg.base_width;
        let plan = [
            (3, w, 1),
            (w, w, 2),
            (w, 2 * w, 2),
            (2 * w, 2 * w, 1),
            (2 * w, 4 * w, 2),
            (4 * w, LATENT_CHANNELS, 1),
        ];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| ConvLayer::new(pb, &format!("conv{i}"), ci, co, ConvGeom::planar(3, s, 1)))
            .collect();
        ReferenceShadingEncoder { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn strided_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.geom.stride[1] == 2).count()
    }

    /// `[B, 3, H, W] -> [B, 16, H/8, W/8]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, maps: Var) -> Result<Var> {
        let s = g.shape(maps).to_vec();
        check_rank(&s, 4, "reference shading encoder")?;
        check_spatial(s[2], s[3])?;
        let x = g.reshape(maps, &[s[0], 3, 1, s[2], s[3]]);
        let y = planar_stack(g, ps, &self.layers, x);
        Ok(g.reshape(y, &[s[0], LATENT_CHANNELS, s[2] / SPATIAL_FACTOR, s[3] / SPATIAL_FACTOR]))
    }

    pub fn encode<T: Scalar>(&self, ps: &ParamStore<T>, maps: &Tensor<T>) -> Result<LatentGrid<T>> {
        let mut g = Graph::new();
        let x = g.input(maps.clone());
        let y = self.forward(&mut g, ps, x)?;
        LatentGrid::new(g.value(y).clone(), LatentKind::ReferenceShading)
    }
}

/// Run planar layers with SiLU between them and a linear last layer.
fn planar_stack<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, layers: &[ConvLayer], mut x: Var) -> Var {
    for (i, layer) in layers.iter().enumerate() {
        x = layer.forward(g, ps, x);
        if i + 1 < layers.len() {
            x = g.silu(x);
        }
    }
    x
}

/// Which conditioning bundle an expression embedding serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpressionRole {
    Reference,
    Driven,
}

/// One affine layer per role mapping coefficients into token width.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionEmbeddings {
    pub reference: Linear,
    pub driven: Linear,
    pub expression_dim: usize,
}

impl ExpressionEmbeddings {
    /// Both layers start at zero, so injection is a no-op until training moves them.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, expression_dim: usize, d_model: usize) -> Self {
        ExpressionEmbeddings {
            reference: Linear::zeroed(pb, "reference", expression_dim, d_model),
            driven: Linear::zeroed(pb, "driven", expression_dim, d_model),
            expression_dim,
        }
    }

    pub fn layer(&self, role: ExpressionRole) -> &Linear {
        match role {
            ExpressionRole::Reference => &self.reference,
            ExpressionRole::Driven => &self.driven,
        }
    }

    /// `[n, D_exp] -> [n, d_model]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, coeffs: Var, role: ExpressionRole) -> Result<Var> {
        let s = g.shape(coeffs);
        if s.len() != 2 || s[1] != self.expression_dim {
            return Err(Error::Shape(format!(
                "expression embedding expects [n, {}] coefficients, got {s:?}",
                self.expression_dim
            )));
        }
        Ok(self.layer(role).forward(g, ps, coeffs))
    }

    pub fn embed<T: Scalar>(&self, ps: &ParamStore<T>, coeff: &[T], role: ExpressionRole) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, coeff.len()], coeff.to_vec())?);
        let y = self.forward(&mut g, ps, x, role)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Deterministic convolutional autoencoder with an 8x spatial bottleneck of 16 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAutoencoder {
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
}

impl ImageAutoencoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Self {
        let w = cfg.autoencoder_width;
        let c = LATENT_CHANNELS;
        let mut enc = pb.scoped("encoder");
        let encoder = [(3, w, 1), (w, w, 2), (w, 2 * w, 2), (2 * w, 2 * w, 2), (2 * w, c, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| ConvLayer::new(&mut enc, &format!("conv{i}"), ci, co, ConvGeom::planar(3, s, 1)))
            .collect();
        let mut dec = pb.scoped("decoder");
        let decoder = [(c, 2 * w), (2 * w, 2 * w), (2 * w, w), (w, w), (w, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| ConvLayer::new(&mut dec, &format!("conv{i}"), ci, co, ConvGeom::planar(3, 1, 1)))
            .collect();
        ImageAutoencoder { encoder, decoder }
    }

    /// `[B, 3, H, W] -> [B, 16, H/8, W/8]`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        check_rank(&s, 4, "image encoder")?;
        check_spatial(s[2], s[3])?;
        let x = g.reshape(images, &[s[0], 3, 1, s[2], s[3]]);
        let y = planar_stack(g, ps, &self.encoder, x);
        Ok(g.reshape(y, &[s[0], LATENT_CHANNELS, s[2] / SPATIAL_FACTOR, s[3] / SPATIAL_FACTOR]))
    }

    /// `[B, 16, h, w] -> [B, 3, 8h, 8w]`; nearest upsampling after each of the first three layers.
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, latents: Var) -> Result<Var> {
        let s = g.shape(latents).to_vec();
        if s.len() != 4 || s[1] != LATENT_CHANNELS || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("image decoder expects [B, {LATENT_CHANNELS}, h, w], got {s:?}")));
        }
        let mut x = g.reshape(latents, &[s[0], LATENT_CHANNELS, 1, s[2], s[3]]);
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(g, ps, x);
            if i < last {
                x = g.silu(x);
            }
            if i < 3 {
                x = g.upsample2x(x);
            }
        }
        Ok(g.reshape(x, &[s[0], 3, s[2] * SPATIAL_FACTOR, s[3] * SPATIAL_FACTOR]))
    }

    pub fn encode_image<T: Scalar>(&self, ps: &ParamStore<T>, images: &Tensor<T>) -> Result<LatentGrid<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let y = self.encode_graph(&mut g, ps, x)?;
        LatentGrid::new(g.value(y).clone(), LatentKind::Video)
    }

    pub fn decode_latent<T: Scalar>(&self, ps: &ParamStore<T>, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(latents.clone());
        let y = self.decode_graph(&mut g, ps, x)?;
        Ok(g.value(y).clone())
    }

    /// Mean squared pixel reconstruction error, as a graph node.
    pub fn reconstruction_loss<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> Result<Var> {
        let z = self.encode_graph(g, ps, images)?;
        let y = self.decode_graph(g, ps, z)?;
        let d = g.sub(y, images);
        let d2 = g.sqr(d);
        Ok(g.mean(d2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kinelift_autograd::ParamStore;

    fn tiny() -> EncoderConfig {
        EncoderConfig { base_width: 2, autoencoder_width: 2, ..EncoderConfig::default() }
    }

    #[test]
    fn driven_minimal_shape() {
        let mut ps = ParamStore::<f64>::new();
        let enc = DrivenShadingEncoder::new(&mut ParamBuilder::new(&mut ps, 0, "drv", "scratch"), &tiny());
        let out = enc.encode(&ps, &Tensor::zeros(&[2, 3, 4, 8, 8])).unwrap();
        assert_eq!(out.values.shape(), &[2, 16, 1, 1, 1]);
        assert_eq!(enc.layer_count(), 7);
    }

    #[test]
    fn indivisible_frames_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let enc = DrivenShadingEncoder::new(&mut ParamBuilder::new(&mut ps, 0, "drv", "scratch"), &tiny());
        let err = enc.encode(&ps, &Tensor::zeros(&[1, 3, 6, 8, 8])).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
        let err = enc.encode(&ps, &Tensor::zeros(&[1, 3, 4, 12, 8])).unwrap_err();
        assert!(err.to_string().contains("multiples of 8"), "{err}");
    }

    #[test]
    fn reference_encoder_layout() {
        let mut ps = ParamStore::<f64>::new();
        let enc = ReferenceShadingEncoder::new(&mut ParamBuilder::new(&mut ps, 0, "ref", "scratch"), &tiny());
        assert_eq!(enc.layer_count(), 6);
        assert_eq!(enc.strided_layers(), 3);
        let out = enc.encode(&ps, &Tensor::zeros(&[5, 3, 16, 8])).unwrap();
        assert_eq!(out.values.shape(), &[5, 16, 2, 1]);
    }

    #[test]
    fn zero_coefficient_gives_bias() {
        let mut ps = ParamStore::<f64>::new();
        let emb = ExpressionEmbeddings::new(&mut ParamBuilder::new(&mut ps, 0, "exp", "scratch"), 3, 4);
        let bias = ps.find("exp.driven.bias").unwrap();
        ps.set(bias, Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = emb.embed(&ps, &[0.0; 3], ExpressionRole::Driven).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(emb.embed(&ps, &[0.0; 2], ExpressionRole::Driven).is_err());
    }

    #[test]
    fn autoencoder_zero_image_is_finite() {
        let mut ps = ParamStore::<f32>::new();
        let ae = ImageAutoencoder::new(&mut ParamBuilder::new(&mut ps, 0, "ae", "autoencoder"), &tiny());
        let z = ae.encode_image(&ps, &Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(z.values.shape(), &[1, 16, 8, 8]);
        let y = ae.decode_latent(&ps, &z.values).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.is_finite());
    }
}
