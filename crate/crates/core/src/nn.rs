//! Parameter construction and the handful of layers the model is built from.

use kinelift_autograd::{ConvGeom, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seeds::derive_seed;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Normal(f64),
    Const(f64),
}

/// Creates named parameters under a prefix and optimizer group. Each parameter
/// draws from its own generator seeded by `(seed, full name)`, so adding or
/// removing a module never perturbs the initialization of the others.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
    group: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, prefix: &str, group: &str) -> Self {
        ParamBuilder { store, seed, prefix: prefix.to_string(), group: group.to_string() }
    }

    pub fn scoped(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            store: self.store,
            seed: self.seed,
            prefix: join(&self.prefix, name),
            group: self.group.clone(),
        }
    }

    pub fn with_group(&mut self, group: &str) -> ParamBuilder<'_, T> {
        ParamBuilder { store: self.store, seed: self.seed, prefix: self.prefix.clone(), group: group.to_string() }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = join(&self.prefix, name);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &full));
        let t = match init {
            Init::Fan { fan_in, gain } => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), &mut rng),
            Init::Normal(std) => Tensor::randn(shape, std, &mut rng),
            Init::Const(c) => Tensor::full(shape, T::lit(c)),
        };
        self.store.add(full, self.group.clone(), t)
    }

    pub fn param_tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.add(join(&self.prefix, name), self.group.clone(), value)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(pb, name, d_in, d_out, Init::Fan { fan_in: d_in, gain: 1.0 }, Some(0.0))
    }

    pub fn zeroed<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(pb, name, d_in, d_out, Init::Const(0.0), Some(0.0))
    }

    pub fn with_init<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        bias: Option<f64>,
    ) -> Self {
        let mut s = pb.scoped(name);
        let w = s.param("weight", &[d_in, d_out], w_init);
        let b = bias.map(|c| s.param("bias", &[d_out], Init::Const(c)));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Convolution over `[B, C, D, H, W]`; planar layers use a depth-1 kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, geom: ConvGeom) -> Self {
        let mut s = pb.scoped(name);
        let k = geom.kernel;
        let fan_in = c_in * geom.kernel_volume();
        let w = s.param("weight", &[c_out, c_in, k[0], k[1], k[2]], Init::Fan { fan_in, gain: 1.0 });
        let b = s.param("bias", &[c_out], Init::Const(0.0));
        ConvLayer { w, b, geom, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv(x, w, Some(b), self.geom)
    }
}

/// Sinusoidal features of a scalar: `[cos(x·f_i), sin(x·f_i)]` with geometric frequencies.
pub fn sinusoidal_features(x: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * freq).cos();
        out[half + i] = (x * freq).sin();
    }
    out
}
