use kinelift_autograd::{ConvGeom, Graph64, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor64::randn(&[2, 3, 5, 6, 7], 1.0, &mut rng);
    let w = Tensor64::randn(&[4, 3, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor64::randn(&[4], 1.0, &mut rng);
    let geom = ConvGeom::new([3, 3, 3], [2, 1, 2], [1, 1, 0]);
    let mut g = Graph64::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv(xv, wv, Some(bv), geom);
    let ys = g.shape(y).to_vec();
    assert_eq!(ys, vec![2, 4, 3, 6, 3]);
    let xi = |n: usize, c: usize, z: isize, r: isize, q: isize| -> f64 {
        if z < 0 || r < 0 || q < 0 || z >= 5 || r >= 6 || q >= 7 {
            0.0
        } else {
            x.data()[(((n * 3 + c) * 5 + z as usize) * 6 + r as usize) * 7 + q as usize]
        }
    };
    for n in 0..2 {
        for o in 0..4 {
            for zo in 0..3 {
                for yo in 0..6 {
                    for xo in 0..3 {
                        let mut s = b.data()[o];
                        for c in 0..3 {
                            for a in 0..3 {
                                for bb in 0..3 {
                                    for e in 0..3 {
                                        let wv = w.data()[(((o * 3 + c) * 3 + a) * 3 + bb) * 3 + e];
                                        s += wv * xi(n, c, (zo * 2 + a) as isize - 1, (yo + bb) as isize - 1, (xo * 2 + e) as isize);
                                    }
                                }
                            }
                        }
                        let got = g.value(y).data()[(((n * 4 + o) * 3 + zo) * 6 + yo) * 3 + xo];
                        assert!((got - s).abs() < 1e-10, "mismatch at {n},{o},{zo},{yo},{xo}");
                    }
                }
            }
        }
    }
}

#[test]
fn matmul_and_bmm_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor64::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor64::randn(&[2, 5, 4], 1.0, &mut rng);
    let mut g = Graph64::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.bmm(av, bv, false, true);
    for i in 0..2 {
        for r in 0..3 {
            for q in 0..5 {
                let s: f64 = (0..4).map(|k| a.data()[(i * 3 + r) * 4 + k] * b.data()[(i * 5 + q) * 4 + k]).sum();
                assert!((g.value(c).data()[(i * 3 + r) * 5 + q] - s).abs() < 1e-12);
            }
        }
    }
}
