//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the nodes in reverse creation order, so the tape order is always a
//! valid topological order.
//!
//! Shape misuse inside the graph is a programming error and panics; callers
//! that accept user data validate shapes before building nodes.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `b` broadcast (right-aligned) onto the shape of `a`.
    AddBcast(usize, usize, Arc<Vec<usize>>),
    MulBcast(usize, usize, Arc<Vec<usize>>),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Silu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { a: usize, rstd: Vec<T> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { a: usize, axis: usize, start: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample2x(usize),
    Sum(usize),
    Mean(usize),
    Rope { a: usize, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn broadcast_map(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert!(b.len() <= a.len(), "cannot broadcast {b:?} onto {a:?}");
    let off = a.len() - b.len();
    let bs = strides(b);
    let mut eff = vec![0usize; a.len()];
    for (i, (&bd, &st)) in b.iter().zip(bs.iter()).enumerate() {
        let ad = a[off + i];
        assert!(bd == ad || bd == 1, "cannot broadcast {b:?} onto {a:?}");
        eff[off + i] = if bd == 1 { 0 } else { st };
    }
    let n = numel(a);
    let mut map = Vec::with_capacity(n);
    if a.is_empty() {
        map.push(0);
        return map;
    }
    let mut idx = vec![0usize; a.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        let mut d = a.len();
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < a[d] {
                break;
            }
            pos -= eff[d] * a[d];
            idx[d] = 0;
        }
    }
    map
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked, e.g. an input under a gradient check.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let (value, trainable) = store.leaf_parts(id);
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        if self.shape(a) == self.shape(b) {
            let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
            let rg = self.rg(&[a.0, b.0]);
            return self.push(v, Op::Add(a.0, b.0), rg);
        }
        let map = Arc::new(broadcast_map(self.shape(a), self.shape(b)));
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(map.iter()).map(|(&x, &j)| x + bv[j]).collect();
        let v = Tensor::new(self.shape(a), data);
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::AddBcast(a.0, b.0, map), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        if self.shape(a) == self.shape(b) {
            let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
            let rg = self.rg(&[a.0, b.0]);
            return self.push(v, Op::Mul(a.0, b.0), rg);
        }
        let map = Arc::new(broadcast_map(self.shape(a), self.shape(b)));
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(map.iter()).map(|(&x, &j)| x * bv[j]).collect();
        let v = Tensor::new(self.shape(a), data);
        let rg = self.rg(&[a.0, b.0]);
        self.push(v, Op::MulBcast(a.0, b.0, map), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::AddScalar(a.0), rg)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `a[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let ashape = self.shape(a).to_vec();
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 2, "matmul rhs must be a matrix, got {wshape:?}");
        let k = *ashape.last().expect("matmul lhs rank >= 1");
        assert_eq!(k, wshape[0], "matmul inner mismatch: {ashape:?} x {wshape:?}");
        let n = wshape[1];
        let m = numel(&ashape) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(self.value(a).data(), 0, m, k),
            MatRef::new(self.value(w).data(), 0, k, n),
            T::zero(),
            &mut out,
            0,
        );
        let mut oshape = ashape;
        *oshape.last_mut().unwrap() = n;
        let rg = self.rg(&[a.0, w.0]);
        self.push(Tensor::new(&oshape, out), Op::MatMul(a.0, w.0), rg)
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`, with optional transposes
    /// of either operand's last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0], "bmm shapes {ash:?} {bsh:?}");
        let (m, k) = if ta { (ash[2], ash[1]) } else { (ash[1], ash[2]) };
        let (k2, n) = if tb { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        assert_eq!(k, k2, "bmm inner mismatch {ash:?} {bsh:?} ta={ta} tb={tb}");
        let batch = ash[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let am = MatRef::new(av, i * ash[1] * ash[2], ash[1], ash[2]);
            let bm = MatRef::new(bv, i * bsh[1] * bsh[2], bsh[1], bsh[2]);
            gemm(
                T::one(),
                if ta { am.t() } else { am },
                if tb { bm.t() } else { bm },
                T::zero(),
                &mut out,
                i * m * n,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor::new(&[batch, m, n], out), Op::Bmm { a: a.0, b: b.0, ta, tb }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Silu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Sigmoid(a.0), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().expect("softmax rank >= 1");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(x.shape(), out);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Softmax(a.0), rg)
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().expect("layer_norm rank >= 1");
        let dn = T::lit(d as f64);
        let mut out = x.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::lit(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let v = Tensor::new(x.shape(), out);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::LayerNorm { a: a.0, rstd }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("reshape element count");
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Reshape(a.0), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).permute(axes);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Permute(a.0, axes.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let v = {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat(&ts, axis)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(v, Op::Concat(ids, axis), rg)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(a).narrow(axis, start, len);
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Narrow { a: a.0, axis, start }, rg)
    }

    /// Convolution of `x[B, C, D, H, W]` with `w[O, C, kd, kh, kw]` plus optional bias `[O]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "conv input must be [B, C, D, H, W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv weight must be [O, C, kd, kh, kw], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(&ws[2..], &geom.kernel, "conv kernel mismatch");
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let dims = [xs[2], xs[3], xs[4]];
        let out = geom.output_dims(dims).expect("conv kernel larger than padded input");
        let plane: usize = out.iter().product();
        let ck = cin * geom.kernel_volume();
        let in_sz = cin * dims.iter().product::<usize>();
        let mut cols = vec![T::zero(); ck * plane];
        let mut y = vec![T::zero(); batch * cout * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..batch {
            im2col(&xv[i * in_sz..(i + 1) * in_sz], cin, dims, &geom, out, &mut cols);
            gemm(
                T::one(),
                MatRef::new(wv, 0, cout, ck),
                MatRef::new(&cols, 0, ck, plane),
                T::zero(),
                &mut y,
                i * cout * plane,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv bias length");
            for (j, chunk) in y.chunks_mut(plane).enumerate() {
                let bias = bv[j % cout];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let rg = self.rg(&ids);
        let v = Tensor::new(&[batch, cout, out[0], out[1], out[2]], y);
        self.push(v, Op::Conv { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, rg)
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let r = s.len();
        assert!(r >= 2, "upsample needs at least two axes");
        let (h, w) = (s[r - 2], s[r - 1]);
        let outer = numel(&s[..r - 2]);
        let xv = self.value(a).data();
        let mut out = Vec::with_capacity(outer * 4 * h * w);
        for o in 0..outer {
            for yy in 0..2 * h {
                let row = &xv[(o * h + yy / 2) * w..][..w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let mut os = s.clone();
        os[r - 2] *= 2;
        os[r - 1] *= 2;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(&os, out), Op::Upsample2x(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        let rg = self.rg(&[a.0]);
        self.push(v, Op::Mean(a.0), rg)
    }

    /// Rotary position rotation of `a[..., L, dh]` using angle tables of shape
    /// `[L, dh / 2]`; channel pairs `(2i, 2i + 1)` are rotated together.
    pub fn rope(&mut self, a: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Var {
        let s = self.shape(a).to_vec();
        let r = s.len();
        assert!(r >= 2, "rope needs [.., L, dh]");
        let (l, dh) = (s[r - 2], s[r - 1]);
        assert!(dh % 2 == 0, "rope head width must be even");
        assert_eq!(cos.len(), l * dh / 2, "rope table length");
        let mut out = self.value(a).data().to_vec();
        rotate_pairs(&mut out, l, dh, &cos, &sin, false);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(&s, out), Op::Rope { a: a.0, cos, sin }, rg)
    }

    /// Gradients of scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Parameter gradients in the order the parameters entered the graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let want = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.zip_map(&self.nodes[*b].value, |x, y| x * y));
                }
                if want(*b) {
                    accumulate(grads, *b, g.zip_map(&self.nodes[*a].value, |x, y| x * y));
                }
            }
            Op::AddBcast(a, b, map) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    let bshape = self.nodes[*b].value.shape();
                    let mut gb = vec![T::zero(); numel(bshape)];
                    for (&gv, &j) in g.data().iter().zip(map.iter()) {
                        gb[j] += gv;
                    }
                    accumulate(grads, *b, Tensor::new(bshape, gb));
                }
            }
            Op::MulBcast(a, b, map) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if want(*a) {
                    let ga = g.data().iter().zip(map.iter()).map(|(&gv, &j)| gv * bv[j]).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), ga));
                }
                if want(*b) {
                    let bshape = self.nodes[*b].value.shape();
                    let mut gb = vec![T::zero(); numel(bshape)];
                    for ((&gv, &j), &x) in g.data().iter().zip(map.iter()).zip(av.iter()) {
                        gb[j] += gv * x;
                    }
                    accumulate(grads, *b, Tensor::new(bshape, gb));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, w) => {
                let av = &self.nodes[*a].value;
                let wv = &self.nodes[*w].value;
                let (k, n) = (wv.dim(0), wv.dim(1));
                let m = av.numel() / k.max(1);
                if want(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), 0, m, n),
                        MatRef::new(wv.data(), 0, k, n).t(),
                        T::zero(),
                        &mut ga,
                        0,
                    );
                    accumulate(grads, *a, Tensor::new(av.shape(), ga));
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::new(av.data(), 0, m, k).t(),
                        MatRef::new(g.data(), 0, m, n),
                        T::zero(),
                        &mut gw,
                        0,
                    );
                    accumulate(grads, *w, Tensor::new(wv.shape(), gw));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (ash, bsh) = (av.shape(), bv.shape());
                let batch = ash[0];
                let (m, n) = (g.dim(1), g.dim(2));
                if want(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for i in 0..batch {
                        let gm = MatRef::new(g.data(), i * m * n, m, n);
                        let bm = MatRef::new(bv.data(), i * bsh[1] * bsh[2], bsh[1], bsh[2]);
                        let opb = if *tb { bm.t() } else { bm };
                        // d op(A) = G op(B)^T ; dA = (d op(A))^T when transposed
                        if *ta {
                            gemm(T::one(), opb, gm.t(), T::zero(), &mut ga, i * ash[1] * ash[2]);
                        } else {
                            gemm(T::one(), gm, opb.t(), T::zero(), &mut ga, i * ash[1] * ash[2]);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(ash, ga));
                }
                if want(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for i in 0..batch {
                        let gm = MatRef::new(g.data(), i * m * n, m, n);
                        let am = MatRef::new(av.data(), i * ash[1] * ash[2], ash[1], ash[2]);
                        let opa = if *ta { am.t() } else { am };
                        // d op(B) = op(A)^T G
                        if *tb {
                            gemm(T::one(), gm.t(), opa, T::zero(), &mut gb, i * bsh[1] * bsh[2]);
                        } else {
                            gemm(T::one(), opa.t(), gm, T::zero(), &mut gb, i * bsh[1] * bsh[2]);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bsh, gb));
                }
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let ga = g.zip_map(x, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut ga = vec![T::zero(); y.len()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr.iter()).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(node.value.shape(), ga));
            }
            Op::LayerNorm { a, rstd } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let dn = T::lit(d as f64);
                let mut ga = vec![T::zero(); y.len()];
                for (r, ((gr, yr), out)) in g.data().chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr.iter()).map(|(&p, &q)| p * q).sum::<T>() / dn;
                    for j in 0..d {
                        out[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                accumulate(grads, *a, Tensor::new(node.value.shape(), ga));
            }
            Op::Reshape(a) => {
                let s = self.nodes[*a].value.shape();
                accumulate(grads, *a, g.reshape(s).expect("reshape back"));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                accumulate(grads, *a, g.permute(&inv));
            }
            Op::Concat(ids, axis) => {
                let mut start = 0;
                for &j in ids {
                    let len = self.nodes[j].value.dim(*axis);
                    if want(j) {
                        accumulate(grads, j, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let src = self.nodes[*a].value.shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let (n, len) = (src[*axis], g.dim(*axis));
                let mut ga = vec![T::zero(); numel(src)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, Tensor::new(src, ga));
            }
            Op::Conv { x, w, b, geom } => self.backprop_conv(*x, *w, *b, geom, g, grads),
            Op::Upsample2x(a) => {
                let s = self.nodes[*a].value.shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let outer = numel(&s[..r - 2]);
                let mut ga = vec![T::zero(); numel(s)];
                let gv = g.data();
                for o in 0..outer {
                    for yy in 0..2 * h {
                        let src = &gv[(o * 2 * h + yy) * 2 * w..][..2 * w];
                        let dst = &mut ga[(o * h + yy / 2) * w..][..w];
                        for xx in 0..2 * w {
                            dst[xx / 2] += src[xx];
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(s, ga));
            }
            Op::Sum(a) => {
                let s = self.nodes[*a].value.shape();
                accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::Mean(a) => {
                let s = self.nodes[*a].value.shape();
                let n = T::lit(numel(s) as f64);
                accumulate(grads, *a, Tensor::full(s, g.item() / n));
            }
            Op::Rope { a, cos, sin } => {
                let s = g.shape();
                let r = s.len();
                let mut ga = g.data().to_vec();
                rotate_pairs(&mut ga, s[r - 2], s[r - 1], cos, sin, true);
                accumulate(grads, *a, Tensor::new(s, ga));
            }
        }
    }

    fn backprop_conv(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let xs = xv.shape();
        let (batch, cin, cout) = (xs[0], xs[1], wv.dim(0));
        let dims = [xs[2], xs[3], xs[4]];
        let out = [g.dim(2), g.dim(3), g.dim(4)];
        let plane: usize = out.iter().product();
        let ck = cin * geom.kernel_volume();
        let in_sz = cin * dims.iter().product::<usize>();
        let want_x = self.nodes[x].requires_grad;
        let want_w = self.nodes[w].requires_grad;
        if let Some(b) = b {
            if self.nodes[b].requires_grad {
                let mut gb = vec![T::zero(); cout];
                for (j, chunk) in g.data().chunks(plane).enumerate() {
                    gb[j % cout] += chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, b, Tensor::new(&[cout], gb));
            }
        }
        if !want_x && !want_w {
            return;
        }
        let mut cols = vec![T::zero(); ck * plane];
        let mut gw = if want_w { vec![T::zero(); wv.numel()] } else { Vec::new() };
        let mut gx = if want_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
        for i in 0..batch {
            let gm = MatRef::new(g.data(), i * cout * plane, cout, plane);
            if want_w {
                im2col(&xv.data()[i * in_sz..(i + 1) * in_sz], cin, dims, geom, out, &mut cols);
                gemm(T::one(), gm, MatRef::new(&cols, 0, ck, plane).t(), T::one(), &mut gw, 0);
            }
            if want_x {
                gemm(T::one(), MatRef::new(wv.data(), 0, cout, ck).t(), gm, T::zero(), &mut cols, 0);
                col2im(&cols, cin, dims, geom, out, &mut gx[i * in_sz..(i + 1) * in_sz]);
            }
        }
        if want_w {
            accumulate(grads, w, Tensor::new(wv.shape(), gw));
        }
        if want_x {
            accumulate(grads, x, Tensor::new(xs, gx));
        }
    }
}

fn rotate_pairs<T: Scalar>(buf: &mut [T], l: usize, dh: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = dh / 2;
    for (row_i, row) in buf.chunks_mut(dh).enumerate() {
        let p = row_i % l;
        for i in 0..half {
            let (c, s) = (cos[p * half + i], sin[p * half + i]);
            let s = if inverse { -s } else { s };
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], j: usize, g: Tensor<T>) {
    match &mut grads[j] {
        Some(existing) => {
            let dst = existing.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data().iter()) {
                *d += *s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
