mod common;

use common::{randn, randomize, small_config};
use kinelift::encoders::ExpressionRole;
use kinelift::LiftModel;
use proptest::prelude::*;

type M = LiftModel<f64>;

fn model() -> M {
    let mut m = M::new(small_config()).unwrap();
    randomize(&mut m, "expression", 0.5, 1);
    m
}

#[test]
fn desk_scale_shapes() {
    let mut cfg = small_config();
    cfg.resolution = 64;
    let m = LiftModel::<f32>::new(cfg).unwrap();
    let c = &m.conditioner;
    let drv = c.driven_encoder.encode(&m.store, &randn(&[1, 3, 16, 64, 64], 1)).unwrap();
    assert_eq!(drv.values.shape(), &[1, 16, 4, 8, 8]);
    let refs = c.reference_encoder.encode(&m.store, &randn(&[5, 3, 64, 64], 2)).unwrap();
    assert_eq!(refs.values.shape(), &[5, 16, 8, 8]);
    let z = m.autoencoder.encode_image(&m.store, &randn(&[1, 3, 64, 64], 3)).unwrap();
    assert_eq!(z.values.shape(), &[1, 16, 8, 8]);
    assert_eq!(m.autoencoder.decode_latent(&m.store, &z.values).unwrap().shape(), &[1, 3, 64, 64]);
    assert_eq!(c.driven_encoder.layer_count(), 7);
    assert_eq!(c.reference_encoder.layer_count(), 6);
    assert_eq!(c.reference_encoder.strided_layers(), 3);
}

#[test]
fn minimal_driven_input() {
    let m = model();
    let y = m.conditioner.driven_encoder.encode(&m.store, &randn(&[2, 3, 4, 8, 8], 4)).unwrap();
    assert_eq!(y.values.shape(), &[2, 16, 1, 1, 1]);
}

#[test]
fn indivisible_inputs_are_shape_errors() {
    let m = model();
    let c = &m.conditioner;
    for shape in [[1, 3, 6, 8, 8], [1, 3, 4, 12, 8], [1, 3, 4, 8, 20]] {
        let e = c.driven_encoder.encode(&m.store, &randn(&shape, 5)).unwrap_err();
        assert_eq!(e.code(), "E_SHAPE", "{shape:?}");
    }
    assert_eq!(c.reference_encoder.encode(&m.store, &randn(&[1, 3, 12, 8], 6)).unwrap_err().code(), "E_SHAPE");
    assert_eq!(m.autoencoder.encode_image(&m.store, &randn(&[1, 3, 8, 10], 7)).unwrap_err().code(), "E_SHAPE");
}

#[test]
fn zero_image_round_trip_is_finite() {
    let m = model();
    let z = m.autoencoder.encode_image(&m.store, &kinelift_autograd::Tensor::zeros(&[1, 3, 16, 16])).unwrap();
    assert!(z.values.is_finite());
    assert!(m.autoencoder.decode_latent(&m.store, &z.values).unwrap().is_finite());
}

#[test]
fn expression_embedding_matches_matvec_oracle() {
    let m = model();
    let e = &m.conditioner.expression;
    let c = [0.3, -1.2, 0.7, 2.0];
    for role in [ExpressionRole::Reference, ExpressionRole::Driven] {
        let lin = e.layer(role);
        let w = m.store.get(lin.w);
        let b = m.store.get(lin.b.unwrap());
        let got = e.embed(&m.store, &c, role).unwrap();
        for j in 0..lin.d_out {
            let mut acc = b.data()[j];
            for i in 0..lin.d_in {
                acc += c[i] * w.data()[i * lin.d_out + j];
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
        assert_eq!(e.embed(&m.store, &[0.0; 4], role).unwrap(), b.data().to_vec());
    }
    assert_eq!(e.embed(&m.store, &[0.0; 3], ExpressionRole::Driven).unwrap_err().code(), "E_SHAPE");
}

#[test]
fn expression_roles_have_independent_parameters() {
    let mut m = model();
    let c = [0.5, 0.1, -0.4, 1.0];
    let before = m.conditioner.expression.embed(&m.store, &c, ExpressionRole::Driven).unwrap();
    randomize(&mut m, "expression.reference", 1.0, 99);
    let after = m.conditioner.expression.embed(&m.store, &c, ExpressionRole::Driven).unwrap();
    assert_eq!(before, after);
    let r1 = m.conditioner.expression.embed(&m.store, &c, ExpressionRole::Reference).unwrap();
    randomize(&mut m, "expression.driven", 1.0, 100);
    assert_eq!(r1, m.conditioner.expression.embed(&m.store, &c, ExpressionRole::Reference).unwrap());
}

#[test]
fn encoders_are_deterministic() {
    let m = model();
    let x = randn(&[1, 3, 8, 16, 16], 8);
    let a = m.conditioner.driven_encoder.encode(&m.store, &x).unwrap();
    let b = m.conditioner.driven_encoder.encode(&m.store, &x).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_contract(b in 1usize..3, f in 1usize..3, h in 1usize..3, w in 1usize..3, seed in 0u64..100) {
        let m = model();
        let c = &m.conditioner;
        let (ff, hh, ww) = (4 * f, 8 * h, 8 * w);
        let y = c.driven_encoder.encode(&m.store, &randn(&[b, 3, ff, hh, ww], seed)).unwrap();
        prop_assert_eq!(y.values.shape(), &[b, 16, f, h, w]);
        let r = c.reference_encoder.encode(&m.store, &randn(&[b, 3, hh, ww], seed + 1)).unwrap();
        prop_assert_eq!(r.values.shape(), &[b, 16, h, w]);
        let z = m.autoencoder.encode_image(&m.store, &randn(&[b, 3, hh, ww], seed + 2)).unwrap();
        prop_assert_eq!(z.values.shape(), &[b, 16, h, w]);
        let d = m.autoencoder.decode_latent(&m.store, &z.values).unwrap();
        prop_assert_eq!(d.shape(), &[b, 3, hh, ww]);
    }

    #[test]
    fn embedding_is_affine(a in prop::collection::vec(-2.0f64..2.0, 4), b in prop::collection::vec(-2.0f64..2.0, 4)) {
        let m = model();
        let e = &m.conditioner.expression;
        for role in [ExpressionRole::Reference, ExpressionRole::Driven] {
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let z = e.embed(&m.store, &[0.0; 4], role).unwrap();
            let ea = e.embed(&m.store, &a, role).unwrap();
            let eb = e.embed(&m.store, &b, role).unwrap();
            let eab = e.embed(&m.store, &ab, role).unwrap();
            for j in 0..z.len() {
                prop_assert!(((eab[j] - z[j]) - (ea[j] - z[j]) - (eb[j] - z[j])).abs() < 1e-12);
            }
        }
    }
}
