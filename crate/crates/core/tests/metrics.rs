use kinelift::image::Image;
use kinelift::metrics::{evaluate_frames, mse, psnr, ssim, PSNR_CAP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Image::from_rgb(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn perturbed(img: &Image, amount: f32, seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = img.data().iter().map(|&v| (v + r.random_range(-amount..amount)).clamp(0.0, 1.0)).collect();
    Image::from_rgb(img.height(), img.width(), data).unwrap()
}

/// SSIM with a direct 2D window sum at every valid position, no separable filtering.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / total;
                        let p = a.pixel(y + i, x + j)[c] as f64;
                        let q = b.pixel(y + i, x + j)[c] as f64;
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum += acc / count as f64;
    }
    sum / 3.0
}

#[test]
fn ssim_matches_direct_window_oracle() {
    for (h, w, seed) in [(11, 11, 1), (16, 20, 2), (32, 32, 3)] {
        let a = random_image(h, w, seed);
        let b = perturbed(&a, 0.2, seed + 10);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-9, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn psnr_reference_values() {
    let a = Image::new(8, 8);
    let b = Image::from_rgb(8, 8, vec![0.1; 8 * 8 * 3]).unwrap();
    // MSE = 0.01 up to f32 rounding of 0.1
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    let ones = Image::from_rgb(8, 8, vec![1.0; 192]).unwrap();
    assert_eq!(mse(&a, &ones).unwrap(), 1.0);
    assert_eq!(psnr(&a, &ones).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
}

#[test]
fn psnr_matches_oracle() {
    let a = random_image(9, 7, 4);
    let b = random_image(9, 7, 5);
    let mut acc = 0.0;
    for y in 0..9 {
        for x in 0..7 {
            for c in 0..3 {
                acc += (a.pixel(y, x)[c] as f64 - b.pixel(y, x)[c] as f64).powi(2);
            }
        }
    }
    let want = -10.0 * (acc / (9.0 * 7.0 * 3.0)).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
}

#[test]
fn report_averages_frames() {
    let gen: Vec<Image> = (0..3).map(|s| random_image(16, 16, s)).collect();
    let refs: Vec<Image> = gen.iter().enumerate().map(|(i, g)| perturbed(g, 0.1 * (i + 1) as f32, 50)).collect();
    let rep = evaluate_frames(&gen, &refs).unwrap();
    assert_eq!(rep.frames.len(), 3);
    let mean: f64 = rep.frames.iter().map(|f| f.psnr).sum::<f64>() / 3.0;
    assert_eq!(rep.mean_psnr, mean);
    assert!(rep.frames[0].psnr > rep.frames[2].psnr);
    assert!(rep.to_text().contains("mean_psnr"));
    assert!(evaluate_frames(&gen, &refs[..2]).is_err());
    assert!(evaluate_frames(&[], &[]).is_err());
}

#[test]
fn small_or_mismatched_images_rejected() {
    assert!(ssim(&Image::new(10, 10), &Image::new(10, 10)).is_err());
    assert!(psnr(&Image::new(4, 4), &Image::new(4, 5)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, amount in 0.01f32..0.5) {
        let a = random_image(12, 14, seed);
        let b = perturbed(&a, amount, seed + 1);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric(seed in 0u64..1000) {
        let a = random_image(5, 6, seed);
        let b = random_image(5, 6, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
