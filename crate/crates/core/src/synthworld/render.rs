//! Pinhole camera, z-buffered triangle rasterizer, and flat Phong shading.

use serde::{Deserialize, Serialize};

use super::proxy::{add, cross, dot, normalize, scale, sub, HeadProxy, Mesh, Vec3};
use crate::error::{Error, Result};
use crate::image::Image;

/// Pinhole camera. Camera coordinates are `R·p + t` with +z forward and +y down
/// the image; pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Camera {
    /// Camera on the +z axis looking at the origin, world +y up.
    pub fn frontal(width: usize, height: usize, distance: f64) -> Self {
        let focal = 1.1 * width.max(height) as f64;
        Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [0.0, 0.0, distance],
        }
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        add([dot(r[0], p), dot(r[1], p), dot(r[2], p)], self.translation)
    }

    /// Camera center in world coordinates, `−Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let r = &self.rotation;
        let t = self.translation;
        let rt = |i: usize| r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2];
        [-rt(0), -rt(1), -rt(2)]
    }

    /// World-space ray direction through image point `(u, v)`, scaled to unit camera depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        [
            r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
            r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
            r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhongMaterial {
    pub ka: f64,
    pub kd: f64,
    pub ks: f64,
    pub shininess: f64,
    /// Unit direction from the surface toward the light.
    pub light_dir: Vec3,
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
}

impl Default for PhongMaterial {
    fn default() -> Self {
        PhongMaterial {
            ka: 0.15,
            kd: 0.75,
            ks: 0.25,
            shininess: 16.0,
            light_dir: normalize([0.3, 0.4, 1.0]),
            ambient: 1.0,
            diffuse: 1.0,
            specular: 1.0,
        }
    }
}

impl PhongMaterial {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ka", self.ka), ("kd", self.kd), ("ks", self.ks)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.shininess > 0.0) {
            return Err(Error::InvalidArgument("shininess must be positive".into()));
        }
        if [self.ambient, self.diffuse, self.specular].iter().any(|&i| !(i >= 0.0)) {
            return Err(Error::InvalidArgument("light intensities must be non-negative".into()));
        }
        if (dot(self.light_dir, self.light_dir).sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("light_dir must be a unit vector".into()));
        }
        Ok(())
    }

    /// Ambient plus diffuse and specular contributions for unit normal `n` and
    /// unit direction `view` toward the eye, returned separately.
    pub fn terms(&self, n: Vec3, view: Vec3) -> (f64, f64) {
        let ndl = dot(n, self.light_dir);
        let diffuse = self.ka * self.ambient + self.kd * ndl.max(0.0) * self.diffuse;
        let specular = if ndl > 0.0 {
            let r = sub(scale(n, 2.0 * ndl), self.light_dir);
            self.ks * dot(r, view).max(0.0).powf(self.shininess) * self.specular
        } else {
            0.0
        };
        (diffuse, specular)
    }

    pub fn intensity(&self, n: Vec3, view: Vec3) -> f64 {
        let (d, s) = self.terms(n, view);
        (d + s).clamp(0.0, 1.0)
    }
}

/// Per-pixel visibility: nearest front face, depth, and perspective-correct barycentrics.
#[derive(Debug, Clone)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub face: Vec<Option<usize>>,
    pub depth: Vec<f64>,
    pub bary: Vec<Vec3>,
}

impl Fragments {
    pub fn coverage(&self) -> usize {
        self.face.iter().filter(|f| f.is_some()).count()
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterize front faces with a depth test. Faces with zero area, or behind the
/// camera, are skipped.
pub fn rasterize(mesh: &Mesh, camera: &Camera) -> Fragments {
    let (w, h) = (camera.width, camera.height);
    let mut frags = Fragments {
        width: w,
        height: h,
        face: vec![None; w * h],
        depth: vec![f64::INFINITY; w * h],
        bary: vec![[0.0; 3]; w * h],
    };
    let eye = camera.center();
    for (f, face) in mesh.faces.iter().enumerate() {
        let v = face.map(|i| mesh.vertices[i]);
        let n = cross(sub(v[1], v[0]), sub(v[2], v[0]));
        if dot(n, n) < 1e-24 || dot(n, sub(eye, v[0])) <= 0.0 {
            continue;
        }
        let vc = v.map(|p| camera.to_camera(p));
        if vc.iter().any(|p| p[2] <= 1e-6) {
            continue;
        }
        let s: [[f64; 2]; 3] = vc.map(|p| [camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy]);
        let area = edge(s[0], s[1], s[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let sign = area.signum();
        let minx = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let maxx = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64) as usize;
        let miny = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let maxy = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64) as usize;
        let denom_ray = |d: Vec3| dot(n, d);
        let plane = dot(n, sub(v[0], eye));
        for py in miny..maxy {
            for px in minx..maxx {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let e0 = edge(s[1], s[2], p) * sign;
                let e1 = edge(s[2], s[0], p) * sign;
                let e2 = edge(s[0], s[1], p) * sign;
                if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
                    continue;
                }
                let d = camera.ray_direction(p[0], p[1]);
                let dn = denom_ray(d);
                if dn == 0.0 {
                    continue;
                }
                let t = plane / dn;
                let i = py * w + px;
                if t > 0.0 && t < frags.depth[i] {
                    let total = e0 + e1 + e2;
                    let b = [e0 / total / vc[0][2], e1 / total / vc[1][2], e2 / total / vc[2][2]];
                    let bs = b[0] + b[1] + b[2];
                    frags.depth[i] = t;
                    frags.face[i] = Some(f);
                    frags.bary[i] = [b[0] / bs, b[1] / bs, b[2] / bs];
                }
            }
        }
    }
    frags
}

/// Flat Phong terms per face: (ambient + diffuse, specular), with the view
/// direction taken at the face centroid.
pub fn face_terms(mesh: &Mesh, f: usize, camera: &Camera, material: &PhongMaterial) -> (f64, f64) {
    let n = normalize(mesh.face_normal(f));
    let view = normalize(sub(camera.center(), mesh.face_centroid(f)));
    material.terms(n, view)
}

/// Grayscale Phong shading map, replicated to three channels; background is 0.
pub fn phong_shade(mesh: &Mesh, camera: &Camera, material: &PhongMaterial) -> Result<Image> {
    material.validate()?;
    let frags = rasterize(mesh, camera);
    let mut cache: Vec<Option<f64>> = vec![None; mesh.faces.len()];
    let mut img = Image::new(camera.height, camera.width);
    for (i, f) in frags.face.iter().enumerate() {
        if let Some(f) = *f {
            let v = *cache[f].get_or_insert_with(|| {
                let (d, s) = face_terms(mesh, f, camera, material);
                (d + s).clamp(0.0, 1.0)
            });
            img.set_pixel(i / camera.width, i % camera.width, [v as f32; 3]);
        }
    }
    Ok(img)
}

/// Textured rendering: the identity texture, looked up at the canonical
/// position of each visible surface point, lit by the same flat Phong terms.
pub fn render_appearance(proxy: &HeadProxy, mesh: &Mesh, camera: &Camera, material: &PhongMaterial) -> Result<Image> {
    material.validate()?;
    if mesh.vertices.len() != proxy.base_vertices.len() {
        return Err(Error::Shape("mesh does not belong to this proxy".into()));
    }
    let frags = rasterize(mesh, camera);
    let mut img = Image::new(camera.height, camera.width);
    for (i, f) in frags.face.iter().enumerate() {
        let Some(f) = *f else { continue };
        let (d, s) = face_terms(mesh, f, camera, material);
        let b = frags.bary[i];
        let face = mesh.faces[f];
        let canon = (0..3).fold([0.0; 3], |acc, k| add(acc, scale(proxy.base_vertices[face[k]], b[k])));
        let tex = proxy.texture.color(canon);
        let rgb = tex.map(|c| (c * d + s).clamp(0.0, 1.0) as f32);
        img.set_pixel(i / camera.width, i % camera.width, rgb);
    }
    Ok(img)
}
