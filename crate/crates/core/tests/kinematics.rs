use kinelift::kinematics::{
    assign_clusters, coverage_stats, kmeans, select_references, update_centroids, ExpressionCoeff,
    ExpressionTrajectory, KMeansParams,
};
use kinelift::synthworld::sample_trajectory;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coeffs(rows: &[Vec<f64>]) -> Vec<ExpressionCoeff> {
    rows.iter().map(|r| ExpressionCoeff::new(r.clone()).unwrap()).collect()
}

fn random_rows(seed: u64, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect()).collect()
}

fn brute_nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (k, c) in centroids.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        // strict comparison keeps the first index on ties
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[test]
fn assignment_matches_exhaustive_search() {
    let pts = random_rows(11, 20, 2, 5.0);
    let cents = random_rows(12, 3, 2, 5.0);
    let labels = assign_clusters(&coeffs(&pts), &cents).unwrap();
    let oracle: Vec<usize> = pts.iter().map(|p| brute_nearest(p, &cents)).collect();
    assert_eq!(labels, oracle);
}

#[test]
fn update_matches_direct_means() {
    let pts = random_rows(3, 50, 100, 1.0);
    let labels: Vec<usize> = (0..50).map(|i| (i * 7) % 4).collect();
    let prev = vec![vec![0.0; 100]; 4];
    let got = update_centroids(&coeffs(&pts), &labels, &prev).unwrap();
    for k in 0..4 {
        let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
        for j in 0..100 {
            let mut s = 0.0;
            for m in &members {
                s += m[j];
            }
            let mean = s / members.len() as f64;
            assert!((got[k][j] - mean).abs() < 1e-12, "cluster {k} dim {j}");
        }
    }
}

#[test]
fn two_blobs_are_separated() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..40 {
        let blob = i % 2;
        let c = if blob == 0 { -10.0 } else { 10.0 };
        rows.push(vec![c + rng.random_range(-1.0..1.0), c + rng.random_range(-1.0..1.0)]);
        truth.push(blob);
    }
    for seed in 0..10 {
        let st = kmeans(&coeffs(&rows), &KMeansParams::new(2, seed)).unwrap();
        let flip = st.labels[0] != truth[0];
        for (l, t) in st.labels.iter().zip(&truth) {
            assert_eq!(*l, if flip { 1 - t } else { *t }, "seed {seed}");
        }
    }
}

#[test]
fn kmeans_is_deterministic_byte_for_byte() {
    let rows = random_rows(9, 60, 5, 3.0);
    let a = kmeans(&coeffs(&rows), &KMeansParams::new(4, 42)).unwrap();
    let b = kmeans(&coeffs(&rows), &KMeansParams::new(4, 42)).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a, b);
}

#[test]
fn k_one_selects_frame_nearest_the_mean() {
    let rows = random_rows(21, 30, 3, 2.0);
    let traj = ExpressionTrajectory::new(coeffs(&rows), 25.0).unwrap();
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
    let want = brute_nearest(&mean, &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    assert_eq!(select_references(&traj, 1, 0).unwrap(), vec![want]);
}

#[test]
fn five_modes_give_one_reference_per_mode() {
    for seed in 1u64..=12 {
        let s = sample_trajectory(seed, 200, 5, 10).unwrap();
        let refs = select_references(&s.trajectory, 5, seed).unwrap();
        let mut modes: Vec<usize> = refs.iter().map(|&i| s.membership[i]).collect();
        modes.sort_unstable();
        assert_eq!(modes, vec![0, 1, 2, 3, 4], "seed {seed}: refs {refs:?}");
    }
}

#[test]
fn all_frames_as_references_cover_perfectly() {
    let s = sample_trajectory(4, 25, 3, 6).unwrap();
    let all: Vec<usize> = (0..25).collect();
    let rep = coverage_stats(&s.trajectory, &all).unwrap();
    assert_eq!(rep.mean_distance, 0.0);
    assert_eq!(rep.max_distance, 0.0);
}

#[test]
fn kmeans_selection_covers_better_than_random_on_average() {
    let s = sample_trajectory(77, 120, 5, 10).unwrap();
    let mut km = 0.0;
    let mut rnd = 0.0;
    for seed in 0..100u64 {
        let refs = select_references(&s.trajectory, 5, seed).unwrap();
        km += coverage_stats(&s.trajectory, &refs).unwrap().mean_distance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = rand::seq::index::sample(&mut rng, 120, 5).into_vec();
        rnd += coverage_stats(&s.trajectory, &pick).unwrap().mean_distance;
    }
    assert!(km <= rnd, "kmeans {km} vs random {rnd}");
}

fn cloud() -> impl Strategy<Value = (Vec<Vec<f64>>, usize, u64)> {
    (1usize..5, 2usize..4, any::<u64>()).prop_flat_map(|(k, d, seed)| {
        (prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k..40), Just(k), Just(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inertia_never_increases((rows, k, seed) in cloud()) {
        let st = kmeans(&coeffs(&rows), &KMeansParams::new(k, seed)).unwrap();
        for w in st.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        prop_assert!(st.inertia >= 0.0);
        prop_assert!(st.labels.iter().all(|&l| l < k));
    }

    #[test]
    fn converged_labels_are_nearest_centroids((rows, k, seed) in cloud()) {
        let mut p = KMeansParams::new(k, seed);
        p.max_iter = 500;
        p.tol = 0.0;
        let st = kmeans(&coeffs(&rows), &p).unwrap();
        for (r, &l) in rows.iter().zip(&st.labels) {
            prop_assert_eq!(l, brute_nearest(r, &st.centroids));
        }
    }

    #[test]
    fn centroids_are_member_means((rows, k, seed) in cloud()) {
        let st = kmeans(&coeffs(&rows), &KMeansParams::new(k, seed)).unwrap();
        let again = update_centroids(&coeffs(&rows), &st.labels, &st.centroids).unwrap();
        // a single extra update from a fixed point only moves centroids if labels changed
        let relabel = assign_clusters(&coeffs(&rows), &again).unwrap();
        if relabel == st.labels {
            for k in 0..st.centroids.len() {
                let members: Vec<&Vec<f64>> = rows.iter().zip(&st.labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
                if members.is_empty() { continue; }
                for j in 0..rows[0].len() {
                    let mean = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                    prop_assert!((again[k][j] - mean).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn references_are_distinct_sorted_frames((rows, k, seed) in cloud()) {
        let traj = ExpressionTrajectory::new(coeffs(&rows), 25.0).unwrap();
        let refs = select_references(&traj, k, seed).unwrap();
        prop_assert_eq!(refs.len(), k);
        prop_assert!(refs.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(refs.iter().all(|&r| r < rows.len()));
    }
}
