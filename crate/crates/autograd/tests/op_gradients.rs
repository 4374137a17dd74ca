//! Every differentiable op against central finite differences in f64.

use std::sync::Arc;

use kinelift_autograd::check::{numeric_gradient, relative_error};
use kinelift_autograd::{ConvGeom, Graph64, Tensor64, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

/// Contracts the op output with a fixed random projection so every output
/// element contributes to the scalar.
fn check(inputs: &[Tensor64], build: impl Fn(&mut Graph64, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph64::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let proj = Tensor64::randn(&probe_shape, 1.0, &mut rng);
    let scalar_of = |ts: &[Tensor64]| -> f64 {
        let mut g = Graph64::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let p = g.input(proj.clone());
    let prod = g.mul(out, p);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient present").clone();
        let numeric = numeric_gradient(
            |x| {
                let mut ts = inputs.to_vec();
                ts[i] = x.clone();
                scalar_of(&ts)
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

fn randn(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    assert!(check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check(&[a.clone()], |g, v| g.sqr(v[0])) < TOL);
    assert!(check(&[a.clone()], |g, v| g.scale(v[0], -0.7)) < TOL);
    assert!(check(&[a.clone()], |g, v| g.add_scalar(v[0], 2.0)) < TOL);
    assert!(check(&[a.clone()], |g, v| g.silu(v[0])) < TOL);
    assert!(check(&[a], |g, v| g.sigmoid(v[0])) < TOL);
}

#[test]
fn broadcast_ops() {
    let a = randn(&[2, 3, 4], 3);
    let bias = randn(&[4], 4);
    let mid = randn(&[2, 1, 4], 5);
    assert!(check(&[a.clone(), bias.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), mid.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), bias], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check(&[a, mid], |g, v| g.mul(v[0], v[1])) < TOL);
}

#[test]
fn matrix_products() {
    let a = randn(&[2, 3, 4], 6);
    let w = randn(&[4, 5], 7);
    assert!(check(&[a, w], |g, v| g.matmul(v[0], v[1])) < TOL);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { randn(&[2, 4, 3], 8) } else { randn(&[2, 3, 4], 8) };
        let b = if tb { randn(&[2, 5, 4], 9) } else { randn(&[2, 4, 5], 9) };
        let err = check(&[a, b], |g, v| g.bmm(v[0], v[1], ta, tb));
        assert!(err < TOL, "bmm ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn normalizations() {
    let a = randn(&[3, 6], 10);
    assert!(check(&[a.clone()], |g, v| g.softmax(v[0])) < TOL);
    assert!(check(&[a], |g, v| g.layer_norm(v[0], 1e-6)) < TOL);
}

#[test]
fn layout_ops() {
    let a = randn(&[2, 3, 4], 11);
    let b = randn(&[2, 2, 4], 12);
    assert!(check(&[a.clone()], |g, v| g.reshape(v[0], &[6, 4])) < TOL);
    assert!(check(&[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1])) < TOL);
    assert!(check(&[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1)) < TOL);
    assert!(check(&[a.clone()], |g, v| g.narrow(v[0], 1, 1, 2)) < TOL);
    assert!(check(&[a.clone()], |g, v| g.upsample2x(v[0])) < TOL);
    assert!(check(&[a.clone()], |g, v| g.mean(v[0])) < TOL);
    assert!(check(&[a], |g, v| g.sum(v[0])) < TOL);
}

#[test]
fn convolutions() {
    let x = randn(&[2, 2, 4, 5, 6], 13);
    let w = randn(&[3, 2, 3, 3, 3], 14);
    let b = randn(&[3], 15);
    for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 2], [0, 1, 0])] {
        let geom = ConvGeom::new([3, 3, 3], stride, pad);
        let err = check(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv(v[0], v[1], Some(v[2]), geom));
        assert!(err < TOL, "conv stride {stride:?} pad {pad:?}: {err}");
    }
    let x2 = randn(&[1, 2, 1, 6, 6], 16);
    let w2 = randn(&[4, 2, 1, 3, 3], 17);
    let err = check(&[x2, w2], |g, v| g.conv(v[0], v[1], None, ConvGeom::planar(3, 2, 1)));
    assert!(err < TOL, "planar conv: {err}");
}

#[test]
fn rotary_positions() {
    let a = randn(&[2, 3, 4], 18);
    let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 + 0.1).collect();
    let cos = Arc::new(angles.iter().map(|t| t.cos()).collect::<Vec<_>>());
    let sin = Arc::new(angles.iter().map(|t| t.sin()).collect::<Vec<_>>());
    assert!(check(&[a], |g, v| g.rope(v[0], cos.clone(), sin.clone())) < TOL);
}

#[test]
fn shared_node_gradients_accumulate() {
    let a = randn(&[5], 19);
    let err = check(&[a], |g, v| {
        let s = g.silu(v[0]);
        let m = g.mul(s, v[0]);
        g.add(m, v[0])
    });
    assert!(err < TOL);
}
