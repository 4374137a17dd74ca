use std::time::Instant;

use kinelift_autograd::{ConvGeom, Graph32, Tensor32};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = Tensor32::randn(&[1, 16, 16, 32, 32], 1.0, &mut rng);
    let w = Tensor32::randn(&[16, 16, 3, 3, 3], 0.1, &mut rng);
    let t = Instant::now();
    let mut g = Graph32::new();
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let y = g.conv(xv, wv, None, ConvGeom::new([3; 3], [1; 3], [1; 3]));
    let l = g.sum(y);
    let fwd = t.elapsed();
    let _ = g.backward(l);
    let macs = 16.0 * 32.0 * 32.0 * 16.0 * 16.0 * 27.0;
    println!("conv fwd {:?} ({:.1} GMAC/s), total {:?}", fwd, macs / fwd.as_secs_f64() / 1e9, t.elapsed());
}
