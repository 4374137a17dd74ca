//! Smooth synthetic expression trajectories visiting a chosen number of modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ExpressionCoeff, ExpressionTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStyle {
    /// Standard deviation of each mode coordinate.
    pub mode_scale: f64,
    /// Amplitude of the band-limited wobble added to every coordinate.
    pub jitter: f64,
    /// Fraction of each segment spent blending into the next mode.
    pub transition: f64,
    pub frame_rate: f64,
}

impl Default for TrajectoryStyle {
    fn default() -> Self {
        TrajectoryStyle { mode_scale: 1.0, jitter: 0.02, transition: 0.3, frame_rate: 25.0 }
    }
}

const WOBBLE_TERMS: usize = 3;

impl TrajectoryStyle {
    /// Upper bound on the distance between any two frames of a single-mode trajectory.
    pub fn single_mode_spread(&self, dim: usize) -> f64 {
        let per_dim: f64 = (1..=WOBBLE_TERMS).map(|q| self.jitter / q as f64).sum();
        2.0 * per_dim * (dim as f64).sqrt()
    }
}

/// A trajectory together with the generator metadata tests use as an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: ExpressionTrajectory<f64>,
    pub modes: Vec<Vec<f64>>,
    /// Mode each frame is closest to in the schedule.
    pub membership: Vec<usize>,
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn sample_trajectory(seed: u64, length: usize, richness: usize, dim: usize) -> Result<SampledTrajectory> {
    sample_trajectory_with(seed, length, richness, dim, &TrajectoryStyle::default())
}

/// Dwell on `richness` random modes in turn, blending smoothly between them.
pub fn sample_trajectory_with(
    seed: u64,
    length: usize,
    richness: usize,
    dim: usize,
    style: &TrajectoryStyle,
) -> Result<SampledTrajectory> {
    if length == 0 || richness == 0 || dim == 0 {
        return Err(Error::InvalidArgument("length, richness and dimension must all be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a_6563_7421);
    let modes: Vec<Vec<f64>> = (0..richness)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * style.mode_scale
                })
                .collect()
        })
        .collect();
    let wobble: Vec<[(f64, f64); WOBBLE_TERMS]> = (0..dim)
        .map(|_| {
            let mut w = [(0.0, 0.0); WOBBLE_TERMS];
            for (q, slot) in w.iter_mut().enumerate() {
                *slot = (rng.random_range(0.5..1.5) * (q + 1) as f64, rng.random_range(0.0..std::f64::consts::TAU));
            }
            w
        })
        .collect();
    let seg_len = length as f64 / richness as f64;
    let mut coeffs = Vec::with_capacity(length);
    let mut membership = Vec::with_capacity(length);
    for f in 0..length {
        let s = f as f64 / seg_len;
        let seg = (s.floor() as usize).min(richness - 1);
        let u = s - seg as f64;
        let blend = if seg + 1 < richness {
            smoothstep((u - (1.0 - style.transition)) / style.transition)
        } else {
            0.0
        };
        let next = (seg + 1).min(richness - 1);
        let phase = f as f64 / length.max(2) as f64 * std::f64::consts::TAU;
        let values: Vec<f64> = (0..dim)
            .map(|j| {
                let base = (1.0 - blend) * modes[seg][j] + blend * modes[next][j];
                let wob: f64 = wobble[j]
                    .iter()
                    .enumerate()
                    .map(|(q, &(freq, ph))| style.jitter / (q + 1) as f64 * (freq * phase + ph).sin())
                    .sum();
                base + wob
            })
            .collect();
        coeffs.push(ExpressionCoeff::new(values)?);
        membership.push(if blend < 0.5 { seg } else { next });
    }
    Ok(SampledTrajectory {
        trajectory: ExpressionTrajectory::new(coeffs, style.frame_rate)?,
        modes,
        membership,
    })
}
