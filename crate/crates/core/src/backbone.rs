//! Compact diffusion transformer over the assembled token sequence, with
//! timestep modulation, identity cross-attention, and low-rank adapters on the
//! attention q/k/v projections.

use std::sync::Arc;

use kinelift_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioning::{patchify, unpatchify, AssembledSequence, Pos, TokenBlock};
use crate::encoders::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_features, Init, Linear, ParamBuilder};
use crate::seeds::derive_seed;

pub const BACKBONE_GROUP: &str = "backbone";
pub const FINETUNE_GROUP: &str = "finetune";
pub const ADAPTER_GROUP: &str = "adapter";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    /// Rotary attention with the head width split across frame, row and column.
    Rope3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ctx: usize,
    pub patch: usize,
    pub positional: PositionalScheme,
    pub rope_base: f64,
    pub ff_mult: usize,
    pub timestep_dim: usize,
    /// Adapter rank; 0 disables adapters.
    pub adapter_rank: usize,
    /// Adapter scale; `None` means `1 / rank`.
    pub adapter_scale: Option<f64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ctx: 64,
            patch: 2,
            positional: PositionalScheme::Rope3d,
            rope_base: 100.0,
            ff_mult: 4,
            timestep_dim: 64,
            adapter_rank: 4,
            adapter_scale: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("head width must be even for rotary positions".into()));
        }
        if self.patch == 0 || self.d_ctx == 0 || self.ff_mult == 0 || self.timestep_dim < 2 {
            return Err(Error::Config("patch, d_ctx, ff_mult and timestep_dim must be positive".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn resolved_adapter_scale(&self, rank: usize) -> f64 {
        self.adapter_scale.unwrap_or(1.0 / rank.max(1) as f64)
    }

    /// Width of a video patch token before embedding.
    pub fn patch_width(&self) -> usize {
        LATENT_CHANNELS * self.patch * self.patch
    }
}

/// Low-rank additive correction `scale · (x·A)·B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoRAAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// A linear projection that may carry an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub name: String,
    pub base: Linear,
    pub adapter: Option<LoRAAdapter>,
}

impl AdaptedLinear {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let full = format!("{}.{name}", pb.prefix());
        AdaptedLinear { name: full, base: Linear::new(pb, name, d_in, d_out), adapter: None }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let y = self.base.forward(g, ps, x);
        match &self.adapter {
            None => y,
            Some(ad) => {
                let a = g.param(ps, ad.a);
                let b = g.param(ps, ad.b);
                let xa = g.matmul(x, a);
                let xab = g.matmul(xa, b);
                let delta = g.scale(xab, T::lit(ad.scale));
                g.add(y, delta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: Linear,
}

impl Attention {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, d_kv: usize) -> Self {
        Attention {
            q: AdaptedLinear::new(pb, "q", d, d),
            k: AdaptedLinear::new(pb, "k", d_kv, d),
            v: AdaptedLinear::new(pb, "v", d_kv, d),
            o: Linear::new(pb, "o", d, d),
        }
    }

    fn projections_mut(&mut self) -> [&mut AdaptedLinear; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }

    fn projections(&self) -> [&AdaptedLinear; 3] {
        [&self.q, &self.k, &self.v]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    modulation: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    ff1: Linear,
    ff2: Linear,
}

/// Rotary angle tables for a token sequence, shape `[L, dh/2]` each.
#[derive(Debug, Clone)]
pub struct RopeTables<T> {
    pub cos: Arc<Vec<T>>,
    pub sin: Arc<Vec<T>>,
}

/// Split `dh/2` rotation pairs across (frame, row, col); frame gets the remainder.
pub fn rope_split(head_dim: usize) -> [usize; 3] {
    let pairs = head_dim / 2;
    let spatial = pairs / 3;
    [pairs - 2 * spatial, spatial, spatial]
}

pub fn rope_tables<T: Scalar>(positions: &[Pos], head_dim: usize, base: f64) -> RopeTables<T> {
    let split = rope_split(head_dim);
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for (axis, &n) in split.iter().enumerate() {
            for i in 0..n {
                let freq = base.powf(-(i as f64) / n as f64);
                let angle = p[axis] as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
    }
    RopeTables { cos: Arc::new(cos), sin: Arc::new(sin) }
}

/// The diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiT {
    pub cfg: BackboneConfig,
    /// Video patch embedding.
    pub video_embed: Linear,
    segment: ParamId,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
}

const MODULATION_CHUNKS: usize = 9;

impl DiT {
    /// Base weights go to the backbone group; the video patch embedding and
    /// velocity head to the fine-tune group.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let pw = cfg.patch_width();
        let (video_embed, head, final_mod) = {
            let mut ft = pb.with_group(FINETUNE_GROUP);
            let video_embed = Linear::new(&mut ft, "video_embed", pw, d);
            let final_mod = Linear::zeroed(&mut ft, "final_mod", d, 2 * d);
            let head = Linear::zeroed(&mut ft, "head", d, pw);
            (video_embed, head, final_mod)
        };
        let segment = pb.param("segment", &[3, d], Init::Normal(0.02));
        let t_mlp1 = Linear::new(pb, "t_mlp1", cfg.timestep_dim, d);
        let t_mlp2 = Linear::new(pb, "t_mlp2", d, d);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut bp = pb.scoped(&format!("blocks.{i}"));
            let modulation = Linear::with_init(&mut bp, "modulation", d, MODULATION_CHUNKS * d, Init::Const(0.0), None);
            // bias: shift 0, scale 0, gate 1 for each of the three sublayers
            let mut bias = vec![T::zero(); MODULATION_CHUNKS * d];
            for s in 0..3 {
                bias[(3 * s + 2) * d..(3 * s + 3) * d].iter_mut().for_each(|v| *v = T::one());
            }
            let mb = bp.param_tensor("modulation.bias", Tensor::new(&[MODULATION_CHUNKS * d], bias));
            let modulation = Linear { b: Some(mb), ..modulation };
            let self_attn = Attention::new(&mut bp.scoped("self_attn"), d, d);
            let cross_attn = Attention::new(&mut bp.scoped("cross_attn"), d, cfg.d_ctx);
            let ff1 = Linear::new(&mut bp, "ff1", d, cfg.ff_mult * d);
            let ff2 = Linear::new(&mut bp, "ff2", cfg.ff_mult * d, d);
            blocks.push(Block { modulation, self_attn, cross_attn, ff1, ff2 });
        }
        Ok(DiT { cfg: cfg.clone(), video_embed, segment, t_mlp1, t_mlp2, blocks, final_mod, head })
    }

    /// Video tokens from latents `[T, 16, h, w]`.
    pub fn embed_video<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, latents: Var) -> Result<TokenBlock> {
        let s = g.shape(latents).to_vec();
        if s.len() != 4 || s[1] != LATENT_CHANNELS {
            return Err(Error::Shape(format!("video latents must be [T, {LATENT_CHANNELS}, h, w], got {s:?}")));
        }
        let p = self.cfg.patch;
        let patches = patchify(g, latents, p)?;
        let value = self.video_embed.forward(g, ps, patches);
        let positions = crate::conditioning::grid_positions(s[0], s[2] / p, s[3] / p, |f| f as i64);
        Ok(TokenBlock { value, positions })
    }

    fn timestep_embedding<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, t: f64) -> Var {
        let feats = sinusoidal_features(t * 1000.0, self.cfg.timestep_dim, 10_000.0);
        let x = g.input(Tensor::from_f64(&[1, self.cfg.timestep_dim], &feats));
        let h = self.t_mlp1.forward(g, ps, x);
        let h = g.silu(h);
        self.t_mlp2.forward(g, ps, h)
    }

    /// Predicted velocity tokens `[L_video, 16·p·p]` for the video positions of `seq`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        seq: &AssembledSequence,
        t: f64,
        context: Option<Var>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
        }
        let s = g.shape(seq.tokens).to_vec();
        if s != [seq.len(), d] {
            return Err(Error::Shape(format!("sequence has shape {s:?}, expected [{}, {d}]", seq.len())));
        }
        if let Some(c) = context {
            let cs = g.shape(c);
            if cs.len() != 2 || cs[1] != self.cfg.d_ctx || cs[0] == 0 {
                return Err(Error::Shape(format!("identity context {cs:?}, expected [n, {}]", self.cfg.d_ctx)));
            }
        }
        let mut x = self.add_segments(g, ps, seq);
        let temb = self.timestep_embedding(g, ps, t);
        let temb = g.silu(temb);
        let rope = rope_tables::<T>(&seq.positions, self.cfg.head_dim(), self.cfg.rope_base);
        for block in &self.blocks {
            x = self.block_forward(g, ps, block, x, temb, context, &rope);
        }
        let video = seq.extract_video(g, x);
        let fm = self.final_mod.forward(g, ps, temb);
        let fm = g.reshape(fm, &[2 * d]);
        let shift = g.narrow(fm, 0, 0, d);
        let scale = g.narrow(fm, 0, d, d);
        let h = modulate(g, video, shift, scale);
        Ok(self.head.forward(g, ps, h))
    }

    /// Velocity tokens back to a latent grid `[T, 16, h, w]`.
    pub fn unpatchify_velocity<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var, frames: usize, h: usize, w: usize) -> Result<Var> {
        unpatchify(g, tokens, frames, LATENT_CHANNELS, h, w, self.cfg.patch)
    }

    fn add_segments<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, seq: &AssembledSequence) -> Var {
        let seg = g.param(ps, self.segment);
        let d = self.cfg.d_model;
        let mut parts = Vec::new();
        let mut start = 0;
        for (k, len) in [seq.ref_len, seq.drv_len, seq.video_len].into_iter().enumerate() {
            if len == 0 {
                continue;
            }
            let rows = g.narrow(seq.tokens, 0, start, len);
            let e = g.narrow(seg, 0, k, 1);
            let e = g.reshape(e, &[d]);
            parts.push(g.add(rows, e));
            start += len;
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        b: &Block,
        x: Var,
        temb: Var,
        context: Option<Var>,
        rope: &RopeTables<T>,
    ) -> Var {
        let d = self.cfg.d_model;
        let m = b.modulation.forward(g, ps, temb);
        let m = g.reshape(m, &[MODULATION_CHUNKS * d]);
        let chunk = |g: &mut Graph<T>, i: usize| g.narrow(m, 0, i * d, d);

        let (sh, sc, gate) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
        let h = modulate(g, x, sh, sc);
        let q = b.self_attn.q.forward(g, ps, h);
        let k = b.self_attn.k.forward(g, ps, h);
        let v = b.self_attn.v.forward(g, ps, h);
        let a = self.attend(g, q, k, v, Some(rope));
        let a = b.self_attn.o.forward(g, ps, a);
        let a = g.mul(a, gate);
        let mut x = g.add(x, a);

        if let Some(ctx) = context {
            let (sh, sc, gate) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));
            let h = modulate(g, x, sh, sc);
            let q = b.cross_attn.q.forward(g, ps, h);
            let k = b.cross_attn.k.forward(g, ps, ctx);
            let v = b.cross_attn.v.forward(g, ps, ctx);
            let a = self.attend(g, q, k, v, None);
            let a = b.cross_attn.o.forward(g, ps, a);
            let a = g.mul(a, gate);
            x = g.add(x, a);
        }

        let (sh, sc, gate) = (chunk(g, 6), chunk(g, 7), chunk(g, 8));
        let h = modulate(g, x, sh, sc);
        let h = b.ff1.forward(g, ps, h);
        let h = g.silu(h);
        let h = b.ff2.forward(g, ps, h);
        let h = g.mul(h, gate);
        g.add(x, h)
    }

    /// Multi-head scaled dot-product attention; rotary positions on q and k when given.
    fn attend<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, rope: Option<&RopeTables<T>>) -> Var {
        let (nh, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let (lq, lk) = (g.shape(q)[0], g.shape(k)[0]);
        let split = |g: &mut Graph<T>, x: Var, l: usize| {
            let x = g.reshape(x, &[l, nh, dh]);
            g.permute(x, &[1, 0, 2])
        };
        let mut qh = split(g, q, lq);
        let mut kh = split(g, k, lk);
        let vh = split(g, v, lk);
        if let Some(r) = rope {
            qh = g.rope(qh, Arc::clone(&r.cos), Arc::clone(&r.sin));
            kh = g.rope(kh, Arc::clone(&r.cos), Arc::clone(&r.sin));
        }
        let qh = g.scale(qh, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = g.bmm(qh, kh, false, true);
        let p = g.softmax(scores);
        let o = g.bmm(p, vh, false, false);
        let o = g.permute(o, &[1, 0, 2]);
        g.reshape(o, &[lq, nh * dh])
    }

    fn projections_mut(&mut self) -> impl Iterator<Item = &mut AdaptedLinear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.self_attn.projections_mut().into_iter().chain(b.cross_attn.projections_mut()))
    }

    /// Every q/k/v projection in the model.
    pub fn projections(&self) -> impl Iterator<Item = &AdaptedLinear> {
        self.blocks
            .iter()
            .flat_map(|b| b.self_attn.projections().into_iter().chain(b.cross_attn.projections()))
    }

    pub fn has_adapters(&self) -> bool {
        self.projections().any(|p| p.adapter.is_some())
    }

    /// Wrap every attention q/k/v projection with an adapter. `A` is seeded
    /// random, `B` is zero. With `freeze_base` the backbone group stops training.
    pub fn attach_adapters<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        rank: usize,
        scale: f64,
        seed: u64,
        freeze_base: bool,
    ) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        if self.has_adapters() {
            return Err(Error::State("adapters are already attached".into()));
        }
        for proj in self.projections_mut() {
            let (d_in, d_out) = (proj.base.d_in, proj.base.d_out);
            let mut pb = ParamBuilder::new(store, derive_seed(seed, "adapters"), &proj.name, ADAPTER_GROUP);
            let a = pb.param("lora_a", &[d_in, rank], Init::Fan { fan_in: d_in, gain: 1.0 });
            let b = pb.param("lora_b", &[rank, d_out], Init::Const(0.0));
            proj.adapter = Some(LoRAAdapter { a, b, rank, scale });
        }
        if freeze_base {
            let ids: Vec<ParamId> =
                store.iter().filter(|(_, e)| e.group == BACKBONE_GROUP).map(|(id, _)| id).collect();
            for id in ids {
                store.set_trainable(id, false);
            }
        }
        Ok(())
    }

    /// Fold adapters into base weights (`W + scale·A·B`) and drop them.
    /// Returns the removed parameter ids; a no-op without adapters.
    pub fn merge_adapters<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Vec<ParamId> {
        let mut removed = Vec::new();
        for proj in self.projections_mut() {
            let Some(ad) = proj.adapter.take() else { continue };
            let (d_in, d_out) = (proj.base.d_in, proj.base.d_out);
            let a = store.get(ad.a).data().to_vec();
            let b = store.get(ad.b).data().to_vec();
            let mut w = store.get(proj.base.w).clone();
            let wd = w.data_mut();
            let scale = T::lit(ad.scale);
            for i in 0..d_in {
                for r in 0..ad.rank {
                    let air = a[i * ad.rank + r] * scale;
                    if air == T::zero() {
                        continue;
                    }
                    for j in 0..d_out {
                        wd[i * d_out + j] += air * b[r * d_out + j];
                    }
                }
            }
            store.set(proj.base.w, w).expect("merged weight keeps its shape");
            store.remove(ad.a);
            store.remove(ad.b);
            removed.extend([ad.a, ad.b]);
        }
        removed
    }
}

/// `LN(x)·(1 + scale) + shift`, with `shift`, `scale` of width `d` broadcast over rows.
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x, 1e-6);
    let s1 = g.add_scalar(scale, T::one());
    let y = g.mul(n, s1);
    g.add(y, shift)
}
