//! Expression coefficients, trajectories, and K-means reference-frame selection.
//!
//! Frames of an input video are clustered in expression-coefficient space and
//! the frame nearest each cluster centroid becomes a reference image, which
//! spreads the reference set across the expressions the video actually shows.

use std::fmt::Write as _;

use kinelift_autograd::Scalar;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_EXPRESSION_DIM: usize = 100;
/// Reference count that performed best in the reference-count sweep.
pub const DEFAULT_REFERENCE_COUNT: usize = 5;

/// One frame's expression state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionCoeff<T = f64> {
    values: Vec<T>,
}

impl<T: Scalar> ExpressionCoeff<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("expression coefficients must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("expression coefficients".into()));
        }
        Ok(ExpressionCoeff { values })
    }

    pub fn zeros(dim: usize) -> Self {
        ExpressionCoeff { values: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cast<U: Scalar>(&self) -> ExpressionCoeff<U> {
        ExpressionCoeff { values: self.values.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn distance(&self, other: &Self) -> T {
        sq_dist(&self.values, &other.values).sqrt()
    }
}

/// Per-frame coefficient stream of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTrajectory<T = f64> {
    coeffs: Vec<ExpressionCoeff<T>>,
    /// Frames per second; metadata only.
    pub frame_rate: f64,
}

impl<T: Scalar> ExpressionTrajectory<T> {
    pub fn new(coeffs: Vec<ExpressionCoeff<T>>, frame_rate: f64) -> Result<Self> {
        let Some(first) = coeffs.first() else {
            return Err(Error::InvalidArgument("trajectory must contain at least one frame".into()));
        };
        let d = first.dim();
        if let Some(bad) = coeffs.iter().position(|c| c.dim() != d) {
            return Err(Error::Shape(format!(
                "frame {bad} has {} coefficients, frame 0 has {d}",
                coeffs[bad].dim()
            )));
        }
        Ok(ExpressionTrajectory { coeffs, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].dim()
    }

    pub fn coeffs(&self) -> &[ExpressionCoeff<T>] {
        &self.coeffs
    }

    pub fn frame(&self, i: usize) -> &ExpressionCoeff<T> {
        &self.coeffs[i]
    }

    /// Contiguous sub-range of frames.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "window {start}..{} outside trajectory of {} frames",
                start + len,
                self.len()
            )));
        }
        Ok(ExpressionTrajectory { coeffs: self.coeffs[start..start + len].to_vec(), frame_rate: self.frame_rate })
    }

    /// One row per frame, optionally preceded by an `e0,…,e{D-1}` header.
    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            let names: Vec<String> = (0..self.dim()).map(|i| format!("e{i}")).collect();
            out.push_str(&names.join(","));
            out.push('\n');
        }
        for c in &self.coeffs {
            for (i, v) in c.values().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, frame_rate: f64) -> Result<Self> {
        let mut coeffs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.starts_with('e') {
                continue;
            }
            let values = line
                .split(',')
                .map(|f| {
                    T::from_str_radix(f.trim(), 10)
                        .map_err(|_| Error::Format(format!("line {}: cannot parse {f:?} as a number", lineno + 1)))
                })
                .collect::<Result<Vec<T>>>()?;
            coeffs.push(ExpressionCoeff::new(values)?);
        }
        Self::new(coeffs, frame_rate)
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn check_dims<T: Scalar>(coeffs: &[ExpressionCoeff<T>], centroids: &[Vec<T>]) -> Result<usize> {
    let Some(c0) = centroids.first() else {
        return Err(Error::InvalidArgument("no cluster centers".into()));
    };
    let d = c0.len();
    for (i, c) in centroids.iter().enumerate() {
        if c.len() != d {
            return Err(Error::Shape(format!("centroid {i} has dimension {}, expected {d}", c.len())));
        }
    }
    for (i, e) in coeffs.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::Shape(format!("sample {i} has dimension {}, centroids have {d}", e.dim())));
        }
    }
    Ok(d)
}

/// Nearest centroid per sample under squared Euclidean distance; ties go to the
/// lowest centroid index.
pub fn assign_clusters<T: Scalar>(coeffs: &[ExpressionCoeff<T>], centroids: &[Vec<T>]) -> Result<Vec<usize>> {
    check_dims(coeffs, centroids)?;
    Ok(coeffs
        .iter()
        .map(|e| {
            let mut best = 0;
            let mut best_d = sq_dist(e.values(), &centroids[0]);
            for (k, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(e.values(), c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Per-cluster means. A cluster with no members keeps its entry from `previous`.
pub fn update_centroids<T: Scalar>(
    coeffs: &[ExpressionCoeff<T>],
    labels: &[usize],
    previous: &[Vec<T>],
) -> Result<Vec<Vec<T>>> {
    let d = check_dims(coeffs, previous)?;
    if labels.len() != coeffs.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), coeffs.len())));
    }
    let k = previous.len();
    let mut sums = vec![vec![T::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for (e, &l) in coeffs.iter().zip(labels) {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{k}")));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(e.values()) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                let inv = T::lit(n as f64);
                s.into_iter().map(|v| v / inv).collect()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the inertia decreases by less than this between iterations.
    pub tol: f64,
    /// Independent initializations; the run with the lowest final inertia wins
    /// (earliest on ties).
    pub restarts: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams { k, seed, max_iter: 100, tol: 1e-8, restarts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState<T = f64> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub inertia: T,
    pub iterations: usize,
    /// Inertia after the initial assignment and after every update.
    pub inertia_history: Vec<T>,
}

impl<T: Scalar> ClusterState<T> {
    /// Stable text form, used to compare runs byte for byte.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k = {}", self.centroids.len());
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "inertia = {:?}", self.inertia.as_f64());
        for (i, c) in self.centroids.iter().enumerate() {
            let vals: Vec<String> = c.iter().map(|v| format!("{:?}", v.as_f64())).collect();
            let _ = writeln!(out, "centroid.{i} = [{}]", vals.join(", "));
        }
        let labels: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(out, "labels = [{}]", labels.join(", "));
        out
    }
}

fn inertia<T: Scalar>(coeffs: &[ExpressionCoeff<T>], centroids: &[Vec<T>], labels: &[usize]) -> T {
    coeffs.iter().zip(labels).map(|(e, &l)| sq_dist(e.values(), &centroids[l])).sum()
}

/// Lloyd iterations from `k` distinct samples drawn uniformly by a seeded
/// generator, repeated `restarts` times from successive draws of one stream.
pub fn kmeans<T: Scalar>(coeffs: &[ExpressionCoeff<T>], params: &KMeansParams) -> Result<ClusterState<T>> {
    let KMeansParams { k, seed, max_iter, restarts, .. } = *params;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if max_iter == 0 || restarts == 0 {
        return Err(Error::InvalidArgument("max_iter and restarts must be at least 1".into()));
    }
    if coeffs.len() < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {} samples", coeffs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterState<T>> = None;
    for _ in 0..restarts {
        let run = lloyd(coeffs, &mut rng, params)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd<T: Scalar>(coeffs: &[ExpressionCoeff<T>], rng: &mut ChaCha8Rng, params: &KMeansParams) -> Result<ClusterState<T>> {
    let mut picks = index::sample(rng, coeffs.len(), params.k).into_vec();
    // sampled order depends on the generator; sort so equal draws give equal centroid order
    picks.sort_unstable();
    let mut centroids: Vec<Vec<T>> = picks.iter().map(|&i| coeffs[i].values().to_vec()).collect();
    let mut labels = assign_clusters(coeffs, &centroids)?;
    let mut current = inertia(coeffs, &centroids, &labels);
    let mut history = vec![current];
    let mut iterations = 0;
    let tol = T::lit(params.tol);
    while iterations < params.max_iter {
        iterations += 1;
        centroids = update_centroids(coeffs, &labels, &centroids)?;
        labels = assign_clusters(coeffs, &centroids)?;
        let next = inertia(coeffs, &centroids, &labels);
        history.push(next);
        let decrease = current - next;
        current = next;
        if decrease < tol {
            break;
        }
    }
    Ok(ClusterState { centroids, labels, inertia: current, iterations, inertia_history: history })
}

/// Frame indices nearest each K-means centroid, sorted ascending.
///
/// Each cluster contributes its member closest to the centroid (earliest frame
/// on ties). A cluster left without members contributes the closest frame not
/// already chosen.
pub fn select_references<T: Scalar>(trajectory: &ExpressionTrajectory<T>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let state = kmeans(trajectory.coeffs(), &KMeansParams::new(k, seed))?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut orphans = Vec::new();
    for (c, centroid) in state.centroids.iter().enumerate() {
        let best = trajectory
            .coeffs()
            .iter()
            .enumerate()
            .filter(|(i, _)| state.labels[*i] == c)
            .map(|(i, e)| (i, sq_dist(e.values(), centroid)))
            .fold(None, |acc: Option<(usize, T)>, (i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            });
        match best {
            Some((i, _)) => chosen.push(i),
            None => orphans.push(c),
        }
    }
    for c in orphans {
        let centroid = &state.centroids[c];
        let pick = trajectory
            .coeffs()
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(i, e)| (i, sq_dist(e.values(), centroid)))
            .fold(None, |acc: Option<(usize, T)>, (i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InvalidArgument("not enough frames for distinct references".into()))?;
        chosen.push(pick);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub reference_count: usize,
    /// Mean over frames of the Euclidean distance to the nearest reference.
    pub mean_distance: f64,
    pub max_distance: f64,
    pub dim_min: Vec<f64>,
    pub dim_max: Vec<f64>,
}

impl CoverageReport {
    pub fn to_key_values(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        format!(
            "reference_count = {}\nmean_distance = {:.9}\nmax_distance = {:.9}\ndim_min = [{}]\ndim_max = [{}]\n",
            self.reference_count,
            self.mean_distance,
            self.max_distance,
            fmt(&self.dim_min),
            fmt(&self.dim_max)
        )
    }
}

/// How well the frames at `refs` cover the whole trajectory.
pub fn coverage_stats<T: Scalar>(trajectory: &ExpressionTrajectory<T>, refs: &[usize]) -> Result<CoverageReport> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("reference set is empty".into()));
    }
    if let Some(&bad) = refs.iter().find(|&&r| r >= trajectory.len()) {
        return Err(Error::InvalidArgument(format!(
            "reference index {bad} outside trajectory of {} frames",
            trajectory.len()
        )));
    }
    let dists: Vec<f64> = trajectory
        .coeffs()
        .iter()
        .map(|e| {
            refs.iter()
                .map(|&r| e.distance(trajectory.frame(r)).as_f64())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let d = trajectory.dim();
    let mut dim_min = vec![f64::INFINITY; d];
    let mut dim_max = vec![f64::NEG_INFINITY; d];
    for e in trajectory.coeffs() {
        for (j, v) in e.values().iter().enumerate() {
            dim_min[j] = dim_min[j].min(v.as_f64());
            dim_max[j] = dim_max[j].max(v.as_f64());
        }
    }
    Ok(CoverageReport {
        reference_count: refs.len(),
        mean_distance: dists.iter().sum::<f64>() / dists.len() as f64,
        max_distance: dists.iter().copied().fold(0.0, f64::max),
        dim_min,
        dim_max,
    })
}
