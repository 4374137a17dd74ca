//! Reference and driving token assembly, the identity context, and the
//! sequence layout handed to the backbone.
//!
//! Token layout: `[reference | driving | video]`. Every token carries an integer
//! `(frame, row, col)` position used by the backbone's rotary attention.
//! Reference frame `m` sits at frame position `-(1 + m)`; driving and video
//! tokens of latent frame `t` share frame position `t`, so a video token and the
//! driving token that describes it have identical positions.

use kinelift_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{
    DrivenShadingEncoder, EncoderConfig, ExpressionEmbeddings, ExpressionRole, ReferenceShadingEncoder, LATENT_CHANNELS,
    SPATIAL_FACTOR, TEMPORAL_FACTOR,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kinematics::ExpressionCoeff;
use crate::nn::{ConvLayer, Init, Linear, ParamBuilder};
use kinelift_autograd::ConvGeom;

/// `(frame, row, col)` token position.
pub type Pos = [i64; 3];

/// Spatial downsampling of the identity featurizer.
pub const IDENTITY_FACTOR: usize = 16;

/// How driving coefficients map onto latent frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalAlignment {
    /// Latent frame `t` takes the coefficient of source frame `4t`.
    First,
    /// Latent frame `t` takes the mean coefficient of source frames `4t..4t+4`.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionConfig {
    /// Add expression embeddings to reference and driving tokens.
    pub use_expression: bool,
    /// Put reference latent tokens into the sequence.
    pub use_reference_tokens: bool,
    /// Cross-attend to the identity context.
    pub use_identity_context: bool,
    pub temporal_alignment: TemporalAlignment,
    /// First-layer width of the identity featurizer.
    pub identity_width: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig {
            use_expression: true,
            use_reference_tokens: true,
            use_identity_context: true,
            temporal_alignment: TemporalAlignment::First,
            identity_width: 16,
        }
    }
}

/// M aligned reference frames: images `[M, 3, H, W]`, shading `[M, 3, H, W]`, coefficients `[M, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet<T> {
    pub images: Tensor<T>,
    pub shading: Tensor<T>,
    pub coeffs: Tensor<T>,
}

impl<T: Scalar> ReferenceSet<T> {
    pub fn new(images: &[Image], shading: &[Image], coeffs: &[ExpressionCoeff<f64>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("reference set is empty".into()));
        }
        if images.len() != shading.len() || images.len() != coeffs.len() {
            return Err(Error::Shape(format!(
                "reference lists are misaligned: {} images, {} shading maps, {} coefficient vectors",
                images.len(),
                shading.len(),
                coeffs.len()
            )));
        }
        Ok(ReferenceSet {
            images: stack_images(images)?,
            shading: stack_images(shading)?,
            coeffs: stack_coeffs(coeffs)?,
        })
    }

    pub fn from_tensors(images: Tensor<T>, shading: Tensor<T>, coeffs: Tensor<T>) -> Result<Self> {
        let (i, s, c) = (images.shape(), shading.shape(), coeffs.shape());
        if i.len() != 4 || i != s || c.len() != 2 || c[0] != i[0] || i[1] != 3 {
            return Err(Error::Shape(format!("misaligned reference tensors {i:?} / {s:?} / {c:?}")));
        }
        if i[0] == 0 {
            return Err(Error::InvalidArgument("reference set is empty".into()));
        }
        Ok(ReferenceSet { images, shading, coeffs })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.dim(2), self.images.dim(3))
    }
}

/// Driving bundle: shading `[3, N, H, W]`, coefficients `[N, D]`, and, for
/// training only, the target video `[3, N, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingSequence<T> {
    pub shading: Tensor<T>,
    pub coeffs: Tensor<T>,
    pub target: Option<Tensor<T>>,
}

impl<T: Scalar> DrivingSequence<T> {
    pub fn new(shading: &[Image], coeffs: &[ExpressionCoeff<f64>], target: Option<&[Image]>) -> Result<Self> {
        if shading.len() != coeffs.len() {
            return Err(Error::Shape(format!(
                "{} driving shading maps but {} coefficient vectors",
                shading.len(),
                coeffs.len()
            )));
        }
        let to_cnhw = |frames: &[Image]| -> Result<Tensor<T>> { Ok(stack_images::<T>(frames)?.permute(&[1, 0, 2, 3])) };
        let target = match target {
            Some(v) if v.len() != shading.len() => {
                return Err(Error::Shape(format!("{} target frames for {} driving frames", v.len(), shading.len())))
            }
            Some(v) => Some(to_cnhw(v)?),
            None => None,
        };
        Self::from_tensors(to_cnhw(shading)?, stack_coeffs(coeffs)?, target)
    }

    pub fn from_tensors(shading: Tensor<T>, coeffs: Tensor<T>, target: Option<Tensor<T>>) -> Result<Self> {
        let s = shading.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(format!("driving shading must be [3, N, H, W], got {s:?}")));
        }
        if s[1] == 0 || s[1] % TEMPORAL_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "driving length must be a positive multiple of {TEMPORAL_FACTOR}, got {}",
                s[1]
            )));
        }
        if coeffs.rank() != 2 || coeffs.dim(0) != s[1] {
            return Err(Error::Shape(format!(
                "driving coefficient count {:?} does not match {} frames",
                coeffs.shape(),
                s[1]
            )));
        }
        if let Some(t) = &target {
            if t.shape() != s {
                return Err(Error::Shape(format!("target video {:?} not aligned with shading {s:?}", t.shape())));
            }
        }
        Ok(DrivingSequence { shading, coeffs, target })
    }

    pub fn len(&self) -> usize {
        self.shading.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_frames(&self) -> usize {
        self.len() / TEMPORAL_FACTOR
    }

    pub fn without_target(&self) -> Self {
        DrivingSequence { target: None, ..self.clone() }
    }
}

fn stack_images<T: Scalar>(frames: &[Image]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut parts = Vec::with_capacity(frames.len());
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Shape(format!("frame {}x{} differs from {h}x{w}", f.height(), f.width())));
        }
        parts.push(f.to_chw::<T>().reshape(&[1, 3, h, w])?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0))
}

fn stack_coeffs<T: Scalar>(coeffs: &[ExpressionCoeff<f64>]) -> Result<Tensor<T>> {
    let first = coeffs.first().ok_or_else(|| Error::InvalidArgument("no coefficients".into()))?;
    let d = first.dim();
    let mut data = Vec::with_capacity(coeffs.len() * d);
    for c in coeffs {
        if c.dim() != d {
            return Err(Error::Shape(format!("coefficient length {} differs from {d}", c.dim())));
        }
        data.extend(c.values().iter().map(|&v| T::lit(v)));
    }
    Ok(Tensor::from_vec(&[coeffs.len(), d], data)?)
}

/// Tokens `[L, d]` in the graph with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub value: Var,
    pub positions: Vec<Pos>,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Evaluated condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens<T> {
    pub x_ref: Tensor<T>,
    pub ref_positions: Vec<Pos>,
    pub x_drv: Tensor<T>,
    pub drv_positions: Vec<Pos>,
    /// `[M·P, d_ctx]`, absent when the identity context is disabled.
    pub identity_context: Option<Tensor<T>>,
}

impl<T: Scalar> ConditionTokens<T> {
    /// Re-enter the tokens into a fresh graph as constants.
    pub fn to_graph(&self, g: &mut Graph<T>) -> (TokenBlock, TokenBlock, Option<Var>) {
        let r = TokenBlock { value: g.input(self.x_ref.clone()), positions: self.ref_positions.clone() };
        let d = TokenBlock { value: g.input(self.x_drv.clone()), positions: self.drv_positions.clone() };
        let c = self.identity_context.as_ref().map(|c| g.input(c.clone()));
        (r, d, c)
    }
}

/// Which part of the sequence a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Reference = 0,
    Driving = 1,
    Video = 2,
}

/// The backbone input: concatenated tokens, positions, and segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub tokens: Var,
    pub positions: Vec<Pos>,
    pub ref_len: usize,
    pub drv_len: usize,
    pub video_len: usize,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn segment(&self, i: usize) -> Segment {
        if i < self.ref_len {
            Segment::Reference
        } else if i < self.ref_len + self.drv_len {
            Segment::Driving
        } else {
            Segment::Video
        }
    }

    /// True at positions that are denoised (the video tokens).
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.segment(i) == Segment::Video).collect()
    }

    pub fn video_start(&self) -> usize {
        self.ref_len + self.drv_len
    }

    /// Pull the masked rows back out of `seq` (same length as this sequence).
    pub fn extract_video<T: Scalar>(&self, g: &mut Graph<T>, seq: Var) -> Var {
        g.narrow(seq, 0, self.video_start(), self.video_len)
    }
}

/// Concatenate `[x_ref | x_drv | video]` along the token axis.
pub fn assemble_sequence<T: Scalar>(
    g: &mut Graph<T>,
    x_ref: &TokenBlock,
    x_drv: &TokenBlock,
    video: &TokenBlock,
) -> Result<AssembledSequence> {
    if x_drv.is_empty() {
        return Err(Error::InvalidArgument("driving tokens must not be empty".into()));
    }
    if video.is_empty() {
        return Err(Error::InvalidArgument("video tokens must not be empty".into()));
    }
    let width = g.shape(video.value).last().copied().unwrap_or(0);
    let mut parts = Vec::new();
    for (name, b) in [("reference", x_ref), ("driving", x_drv), ("video", video)] {
        if b.is_empty() {
            continue;
        }
        let s = g.shape(b.value);
        if s.len() != 2 || s[0] != b.len() || s[1] != width {
            return Err(Error::Shape(format!(
                "{name} tokens have shape {s:?}, expected [{}, {width}]",
                b.len()
            )));
        }
        parts.push(b.value);
    }
    let tokens = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    let mut positions = x_ref.positions.clone();
    positions.extend_from_slice(&x_drv.positions);
    positions.extend_from_slice(&video.positions);
    Ok(AssembledSequence { tokens, positions, ref_len: x_ref.len(), drv_len: x_drv.len(), video_len: video.len() })
}

/// Grid positions of `frames` patch grids of `gh × gw`, frame ids from `frame_id`.
pub fn grid_positions(frames: usize, gh: usize, gw: usize, frame_id: impl Fn(usize) -> i64) -> Vec<Pos> {
    let mut out = Vec::with_capacity(frames * gh * gw);
    for f in 0..frames {
        for r in 0..gh {
            for c in 0..gw {
                out.push([frame_id(f), r as i64, c as i64]);
            }
        }
    }
    out
}

/// `[F, C, h, w] -> [F·(h/p)·(w/p), C·p·p]`, tokens ordered frame, row, col.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, grid: Var, p: usize) -> Result<Var> {
    let s = g.shape(grid).to_vec();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::Shape(format!("cannot cut {s:?} into {p}x{p} patches")));
    }
    let (f, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    let x = g.reshape(grid, &[f, c, gh, p, gw, p]);
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5]);
    Ok(g.reshape(x, &[f * gh * gw, c * p * p]))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, tokens: Var, frames: usize, channels: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (gh, gw) = (h / p, w / p);
    if s != [frames * gh * gw, channels * p * p] || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "tokens {s:?} do not tile a {frames}x{channels}x{h}x{w} grid with patch {p}"
        )));
    }
    let x = g.reshape(tokens, &[frames, gh, gw, channels, p, p]);
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5]);
    Ok(g.reshape(x, &[frames, channels, h, w]))
}

/// Tensor form of [`patchify`].
pub fn patchify_tensor<T: Scalar>(grid: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(grid.clone());
    let y = patchify(&mut g, x, p)?;
    Ok(g.value(y).clone())
}

/// Tensor form of [`unpatchify`].
pub fn unpatchify_tensor<T: Scalar>(tokens: &Tensor<T>, frames: usize, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone());
    let y = unpatchify(&mut g, x, frames, channels, h, w, p)?;
    Ok(g.value(y).clone())
}

/// Four stride-2 planar convolutions turning each reference image into
/// `(H/16)·(W/16)` feature tokens, plus a learned embedding per patch location.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityFeaturizer {
    layers: Vec<ConvLayer>,
    pos: kinelift_autograd::ParamId,
    pub d_ctx: usize,
    pub tokens_per_frame: usize,
}

impl IdentityFeaturizer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, width: usize, d_ctx: usize, resolution: (usize, usize)) -> Self {
        let w = width;
        let layers = [(3, w), (w, 2 * w), (2 * w, 4 * w), (4 * w, d_ctx)]
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| ConvLayer::new(pb, &format!("conv{i}"), ci, co, ConvGeom::planar(3, 2, 1)))
            .collect();
        let tokens_per_frame = (resolution.0 / IDENTITY_FACTOR) * (resolution.1 / IDENTITY_FACTOR);
        let pos = pb.param("pos", &[tokens_per_frame.max(1), d_ctx], Init::Normal(0.02));
        IdentityFeaturizer { layers, pos, d_ctx, tokens_per_frame }
    }

    /// `[M, 3, H, W] -> [M·P, d_ctx]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % IDENTITY_FACTOR != 0 || s[3] % IDENTITY_FACTOR != 0 || s[0] == 0 {
            return Err(Error::Shape(format!(
                "identity featurizer expects [M, 3, H, W] with H, W multiples of {IDENTITY_FACTOR}, got {s:?}"
            )));
        }
        let (m, gh, gw) = (s[0], s[2] / IDENTITY_FACTOR, s[3] / IDENTITY_FACTOR);
        if gh * gw != self.tokens_per_frame {
            return Err(Error::Shape(format!(
                "identity featurizer was built for {} tokens per frame, input gives {}",
                self.tokens_per_frame,
                gh * gw
            )));
        }
        let mut x = g.reshape(images, &[m, 3, 1, s[2], s[3]]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, ps, x);
            if i + 1 < self.layers.len() {
                x = g.silu(x);
            }
        }
        let x = g.reshape(x, &[m, self.d_ctx, gh * gw]);
        let x = g.permute(x, &[0, 2, 1]);
        let pos = g.param(ps, self.pos);
        let x = g.add(x, pos);
        Ok(g.reshape(x, &[m * gh * gw, self.d_ctx]))
    }
}

/// The conditioning modules: shading encoders, expression embeddings, the two
/// condition patch embeddings, and the identity featurizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub cfg: ConditionConfig,
    pub patch: usize,
    pub d_model: usize,
    pub reference_encoder: ReferenceShadingEncoder,
    pub driven_encoder: DrivenShadingEncoder,
    pub expression: ExpressionEmbeddings,
    /// Reference patch embedding over the 32-channel (image latent + shading latent) grid.
    pub psi_ref: Linear,
    /// Driven patch embedding over each latent time slice.
    pub psi_drv: Linear,
    pub identity: IdentityFeaturizer,
}

impl Conditioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &ConditionConfig,
        enc: &EncoderConfig,
        expression_dim: usize,
        d_model: usize,
        d_ctx: usize,
        patch: usize,
        resolution: (usize, usize),
    ) -> Self {
        let c = LATENT_CHANNELS;
        Conditioner {
            cfg: cfg.clone(),
            patch,
            d_model,
            reference_encoder: ReferenceShadingEncoder::new(&mut pb.scoped("reference_encoder"), enc),
            driven_encoder: DrivenShadingEncoder::new(&mut pb.scoped("driven_encoder"), enc),
            expression: ExpressionEmbeddings::new(&mut pb.scoped("expression"), expression_dim, d_model),
            psi_ref: Linear::new(pb, "psi_ref", 2 * c * patch * patch, d_model),
            psi_drv: Linear::new(pb, "psi_drv", c * patch * patch, d_model),
            identity: IdentityFeaturizer::new(&mut pb.scoped("identity"), cfg.identity_width, d_ctx, resolution),
        }
    }

    /// Reference tokens from pre-encoded image latents `[M, 16, h, w]`, shading
    /// maps `[M, 3, H, W]` and coefficients `[M, D]`.
    pub fn build_reference_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        image_latents: Var,
        shading: Var,
        coeffs: Var,
    ) -> Result<TokenBlock> {
        let m = g.shape(shading)[0];
        let ls = g.shape(image_latents).to_vec();
        if m == 0 {
            return Err(Error::InvalidArgument("reference set is empty".into()));
        }
        if ls.len() != 4 || ls[0] != m || g.shape(coeffs)[0] != m {
            return Err(Error::Shape(format!(
                "reference latents {ls:?}, shading {:?} and coefficients {:?} are misaligned",
                g.shape(shading),
                g.shape(coeffs)
            )));
        }
        let s_lat = self.reference_encoder.forward(g, ps, shading)?;
        if g.shape(s_lat) != ls.as_slice() {
            return Err(Error::Shape(format!(
                "image latents {ls:?} do not match shading latents {:?}",
                g.shape(s_lat)
            )));
        }
        let grid = g.concat(&[image_latents, s_lat], 1);
        let patches = patchify(g, grid, self.patch)?;
        let mut x = self.psi_ref.forward(g, ps, patches);
        let (gh, gw) = (ls[2] / self.patch, ls[3] / self.patch);
        if self.cfg.use_expression {
            let e = self.expression.forward(g, ps, coeffs, ExpressionRole::Reference)?;
            x = add_per_frame(g, x, e, m, gh * gw, self.d_model);
        }
        Ok(TokenBlock { value: x, positions: grid_positions(m, gh, gw, |f| -(1 + f as i64)) })
    }

    /// Driving tokens from shading `[3, N, H, W]` and coefficients `[N, D]`, time-major.
    pub fn build_driving_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        shading: Var,
        coeffs: Var,
    ) -> Result<TokenBlock> {
        let s = g.shape(shading).to_vec();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(format!("driving shading must be [3, N, H, W], got {s:?}")));
        }
        let n = s[1];
        if g.shape(coeffs).first() != Some(&n) {
            return Err(Error::Shape(format!(
                "{} driving coefficient vectors for {n} frames",
                g.shape(coeffs).first().copied().unwrap_or(0)
            )));
        }
        let x = g.reshape(shading, &[1, 3, n, s[2], s[3]]);
        let lat = self.driven_encoder.forward(g, ps, x)?;
        let ls = g.shape(lat).to_vec();
        let (t, h, w) = (ls[2], ls[3], ls[4]);
        let lat = g.reshape(lat, &[LATENT_CHANNELS, t, h, w]);
        let lat = g.permute(lat, &[1, 0, 2, 3]);
        let patches = patchify(g, lat, self.patch)?;
        let mut x = self.psi_drv.forward(g, ps, patches);
        let (gh, gw) = (h / self.patch, w / self.patch);
        if self.cfg.use_expression {
            let sel = g.input(alignment_matrix::<T>(n, self.cfg.temporal_alignment));
            let per_latent = g.matmul(sel, coeffs);
            let e = self.expression.forward(g, ps, per_latent, ExpressionRole::Driven)?;
            x = add_per_frame(g, x, e, t, gh * gw, self.d_model);
        }
        Ok(TokenBlock { value: x, positions: grid_positions(t, gh, gw, |f| f as i64) })
    }

    /// Identity context `[M·P, d_ctx]` from reference images `[M, 3, H, W]`.
    pub fn build_identity_context<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, images: Var) -> Result<Var> {
        self.identity.forward(g, ps, images)
    }

    /// Latent-grid patch count for an `H × W` frame.
    pub fn tokens_per_frame(&self, h: usize, w: usize) -> usize {
        (h / SPATIAL_FACTOR / self.patch) * (w / SPATIAL_FACTOR / self.patch)
    }
}

/// `[N/4, N]` matrix selecting (or averaging) each latent frame's source coefficients.
pub fn alignment_matrix<T: Scalar>(n: usize, mode: TemporalAlignment) -> Tensor<T> {
    let t = n / TEMPORAL_FACTOR;
    let mut m = vec![T::zero(); t * n];
    for i in 0..t {
        match mode {
            TemporalAlignment::First => m[i * n + TEMPORAL_FACTOR * i] = T::one(),
            TemporalAlignment::Mean => {
                for j in 0..TEMPORAL_FACTOR {
                    m[i * n + TEMPORAL_FACTOR * i + j] = T::lit(1.0 / TEMPORAL_FACTOR as f64);
                }
            }
        }
    }
    Tensor::new(&[t, n], m)
}

/// Add row `f` of `per_frame [F, d]` to every token of frame `f` in `tokens [F·n, d]`.
fn add_per_frame<T: Scalar>(g: &mut Graph<T>, tokens: Var, per_frame: Var, frames: usize, n: usize, d: usize) -> Var {
    let x = g.reshape(tokens, &[frames, n, d]);
    let e = g.reshape(per_frame, &[frames, 1, d]);
    let y = g.add(x, e);
    g.reshape(y, &[frames * n, d])
}
