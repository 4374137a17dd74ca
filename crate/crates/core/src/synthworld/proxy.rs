//! Parametric head proxy: a bumpy ellipsoid mesh with a linear expression basis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::ExpressionCoeff;

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

/// Triangle mesh with outward winding.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Unnormalized face normal `(v1 − v0) × (v2 − v0)`.
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        cross(sub(self.vertices[b], self.vertices[a]), sub(self.vertices[c], self.vertices[a]))
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        scale(add(add(self.vertices[a], self.vertices[b]), self.vertices[c]), 1.0 / 3.0)
    }

    pub fn centroid(&self) -> Vec3 {
        let s = self.vertices.iter().fold([0.0; 3], |acc, &v| add(acc, v));
        scale(s, 1.0 / self.vertices.len().max(1) as f64)
    }
}

/// Smooth per-identity colouring as a function of canonical surface position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralTexture {
    pub palette: [[f64; 3]; 3],
    /// Three sinusoidal fields `sin(k·p + phase)`, one per palette entry.
    pub waves: [[f64; 4]; 3],
    pub sharpness: f64,
}

impl ProceduralTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut palette = [[0.0; 3]; 3];
        for c in palette.iter_mut() {
            for ch in c.iter_mut() {
                *ch = rng.random_range(0.2..0.95);
            }
        }
        let mut waves = [[0.0; 4]; 3];
        for w in waves.iter_mut() {
            let dir = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let freq = rng.random_range(1.5..3.5);
            *w = [dir[0] * freq, dir[1] * freq, dir[2] * freq, rng.random_range(0.0..std::f64::consts::TAU)];
        }
        ProceduralTexture { palette, waves, sharpness: 3.0 }
    }

    /// Softmax blend of the palette; smooth in `p`.
    pub fn color(&self, p: Vec3) -> Vec3 {
        let logits: Vec<f64> = self
            .waves
            .iter()
            .map(|w| self.sharpness * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + w[3]).sin())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut out = [0.0; 3];
        for (k, wk) in e.iter().enumerate() {
            for c in 0..3 {
                out[c] += wk / s * self.palette[k][c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyOptions {
    /// Upper bound on the vertex count; the mesh is the largest UV sphere within it.
    pub vertex_budget: usize,
    pub expression_dim: usize,
    /// Replace the expression basis by zeros (deformation becomes the identity).
    pub zero_basis: bool,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        ProxyOptions { vertex_budget: 800, expression_dim: crate::kinematics::DEFAULT_EXPRESSION_DIM, zero_basis: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProxy {
    pub base_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Layout `[vertex][axis][coefficient]`.
    pub blend_basis: Vec<f64>,
    pub expression_dim: usize,
    pub identity_seed: u64,
    pub texture: ProceduralTexture,
}

/// Angular falloff around `center`, both unit vectors.
fn bump(dir: Vec3, center: Vec3, width: f64) -> f64 {
    (-(1.0 - dot(dir, center)) / (width * width)).exp()
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn uv_sphere(budget: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let rings = (((budget - 2) as f64 / 2.0).sqrt().floor() as usize).max(2);
    let segs = ((budget - 2) / rings).max(3);
    let mut dirs = vec![[0.0, 1.0, 0.0]];
    for i in 1..=rings {
        let theta = std::f64::consts::PI * i as f64 / (rings + 1) as f64;
        for j in 0..segs {
            let phi = std::f64::consts::TAU * j as f64 / segs as f64;
            dirs.push([theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()]);
        }
    }
    dirs.push([0.0, -1.0, 0.0]);
    let south = dirs.len() - 1;
    let at = |i: usize, j: usize| 1 + (i - 1) * segs + (j % segs);
    let mut faces = Vec::new();
    for j in 0..segs {
        faces.push([0, at(1, j), at(1, j + 1)]);
    }
    for i in 1..rings {
        for j in 0..segs {
            faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    for j in 0..segs {
        faces.push([south, at(rings, j + 1), at(rings, j)]);
    }
    (dirs, faces)
}

pub fn make_head_proxy(identity_seed: u64, vertex_budget: usize, expression_dim: usize) -> Result<HeadProxy> {
    make_head_proxy_with(identity_seed, ProxyOptions { vertex_budget, expression_dim, zero_basis: false })
}

/// Deterministic head proxy for `identity_seed`.
pub fn make_head_proxy_with(identity_seed: u64, opts: ProxyOptions) -> Result<HeadProxy> {
    if opts.vertex_budget < 12 {
        return Err(Error::InvalidArgument(format!("vertex budget {} below the minimum of 12", opts.vertex_budget)));
    }
    if opts.expression_dim == 0 {
        return Err(Error::InvalidArgument("expression dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x6865_6164_5f70_7278);
    let radii = [
        0.78 * (1.0 + rng.random_range(-0.06..0.06)),
        1.0 * (1.0 + rng.random_range(-0.05..0.05)),
        0.88 * (1.0 + rng.random_range(-0.06..0.06)),
    ];
    let nose = normalize([0.0, -0.1, 1.0]);
    let nose_amp = rng.random_range(0.10..0.15);
    let extra: Vec<(Vec3, f64, f64)> = (0..3)
        .map(|_| {
            let c = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            (c, rng.random_range(-0.04..0.04), rng.random_range(0.35..0.6))
        })
        .collect();
    let (dirs, mut faces) = uv_sphere(opts.vertex_budget);
    let base_vertices: Vec<Vec3> = dirs
        .iter()
        .map(|&d| {
            let ell = 1.0 / ((d[0] / radii[0]).powi(2) + (d[1] / radii[1]).powi(2) + (d[2] / radii[2]).powi(2)).sqrt();
            let mut m = 1.0 + nose_amp * bump(d, nose, 0.22);
            for &(c, a, w) in &extra {
                m += a * bump(d, c, w);
            }
            scale(d, ell * m)
        })
        .collect();
    // enforce outward winding relative to the mesh centroid
    let mesh = Mesh { vertices: base_vertices.clone(), faces: faces.clone() };
    let center = mesh.centroid();
    for (f, face) in faces.iter_mut().enumerate() {
        if dot(mesh.face_normal(f), sub(mesh.face_centroid(f), center)) < 0.0 {
            face.swap(1, 2);
        }
    }

    let d = opts.expression_dim;
    let v = base_vertices.len();
    let mut blend_basis = vec![0.0; v * 3 * d];
    if !opts.zero_basis {
        let columns = expression_columns(&mut rng, d);
        for (vi, (&p, &dir)) in base_vertices.iter().zip(dirs.iter()).enumerate() {
            for (j, col) in columns.iter().enumerate() {
                let off = col.offset(p, dir);
                for a in 0..3 {
                    blend_basis[(vi * 3 + a) * d + j] = off[a];
                }
            }
        }
    }
    let texture = ProceduralTexture::random(&mut rng);
    Ok(HeadProxy { base_vertices, faces, blend_basis, expression_dim: d, identity_seed, texture })
}

enum Column {
    Yaw(f64),
    Pitch(f64),
    Jaw(f64),
    Bump { center: Vec3, width: f64, amp: f64 },
}

impl Column {
    fn offset(&self, p: Vec3, dir: Vec3) -> Vec3 {
        match *self {
            // linearized rotations about the vertical and lateral axes
            Column::Yaw(k) => [k * p[2], 0.0, -k * p[0]],
            Column::Pitch(k) => [0.0, -k * p[2], k * p[1]],
            Column::Jaw(k) => {
                let w = smoothstep((-0.05 - p[1]) / 0.3) * smoothstep((p[2] + 0.2) / 0.4);
                [0.0, -k * w, 0.25 * k * w]
            }
            Column::Bump { center, width, amp } => scale(dir, amp * bump(dir, center, width)),
        }
    }
}

fn expression_columns(rng: &mut ChaCha8Rng, d: usize) -> Vec<Column> {
    (0..d)
        .map(|j| match j {
            0 => Column::Yaw(0.25),
            1 => Column::Pitch(0.15),
            2 => Column::Jaw(0.14),
            _ => {
                let center = normalize([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.2..1.0),
                ]);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Column::Bump {
                    center,
                    width: rng.random_range(0.25..0.5),
                    amp: sign * 0.08 * 0.92f64.powi(j as i32 - 3),
                }
            }
        })
        .collect()
}

impl HeadProxy {
    pub fn vertex_count(&self) -> usize {
        self.base_vertices.len()
    }

    pub fn base_mesh(&self) -> Mesh {
        Mesh { vertices: self.base_vertices.clone(), faces: self.faces.clone() }
    }

    pub fn basis(&self, vertex: usize, axis: usize, coeff: usize) -> f64 {
        self.blend_basis[(vertex * 3 + axis) * self.expression_dim + coeff]
    }
}

/// `base + basis · coeff`; faces are shared with the proxy.
pub fn deform_mesh(proxy: &HeadProxy, coeff: &ExpressionCoeff<f64>) -> Result<Mesh> {
    let d = proxy.expression_dim;
    if coeff.dim() != d {
        return Err(Error::Shape(format!("proxy expects {d} expression coefficients, got {}", coeff.dim())));
    }
    let c = coeff.values();
    let vertices = proxy
        .base_vertices
        .iter()
        .enumerate()
        .map(|(vi, &b)| {
            let mut out = b;
            for (a, o) in out.iter_mut().enumerate() {
                let row = &proxy.blend_basis[(vi * 3 + a) * d..(vi * 3 + a + 1) * d];
                *o += row.iter().zip(c).map(|(w, x)| w * x).sum::<f64>();
            }
            out
        })
        .collect();
    Ok(Mesh { vertices, faces: proxy.faces.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_budget_gives_twelve_vertices() {
        let p = make_head_proxy(1, 12, 4).unwrap();
        assert_eq!(p.vertex_count(), 12);
        assert!(make_head_proxy(1, 11, 4).is_err());
    }

    #[test]
    fn faces_index_existing_vertices_and_point_outward() {
        for seed in 0..4 {
            let p = make_head_proxy(seed, 500, 10).unwrap();
            let mesh = p.base_mesh();
            let c = mesh.centroid();
            for (f, face) in p.faces.iter().enumerate() {
                assert!(face.iter().all(|&i| i < p.vertex_count()));
                assert!(dot(mesh.face_normal(f), sub(mesh.face_centroid(f), c)) > 0.0);
            }
        }
    }

    #[test]
    fn mesh_is_closed() {
        use std::collections::HashMap;
        let p = make_head_proxy(3, 300, 5).unwrap();
        let mut edges: HashMap<(usize, usize), i32> = HashMap::new();
        for f in &p.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&n| n == 2), "every edge shared by exactly two faces");
    }

    #[test]
    fn zero_coefficients_leave_base_mesh() {
        let p = make_head_proxy(2, 200, 7).unwrap();
        let m = deform_mesh(&p, &ExpressionCoeff::zeros(7)).unwrap();
        assert_eq!(m.vertices, p.base_vertices);
    }

    #[test]
    fn wrong_coefficient_count_rejected() {
        let p = make_head_proxy(2, 200, 7).unwrap();
        assert!(matches!(deform_mesh(&p, &ExpressionCoeff::zeros(6)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_basis_flag_makes_deformation_identity() {
        let opts = ProxyOptions { vertex_budget: 100, expression_dim: 3, zero_basis: true };
        let p = make_head_proxy_with(5, opts).unwrap();
        let c = ExpressionCoeff::new(vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(deform_mesh(&p, &c).unwrap().vertices, p.base_vertices);
    }
}
