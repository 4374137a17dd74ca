use kinelift::kinematics::ExpressionCoeff;
use kinelift::synthworld::{
    deform_mesh, make_head_proxy, make_head_proxy_with, phong_shade, rasterize, render_appearance, render_frame,
    Camera, Dataset, DatasetSpec, Mesh, PhongMaterial, ProxyOptions, TrajectoryStyle,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn unit(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Möller–Trumbore: ray parameter and smallest barycentric coordinate.
fn hit(orig: V3, dir: V3, tri: [V3; 3]) -> Option<(f64, f64)> {
    let e1 = sub(tri[1], tri[0]);
    let e2 = sub(tri[2], tri[0]);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-15 {
        return None;
    }
    let s = sub(orig, tri[0]);
    let u = dot(s, p) / det;
    let q = cross(s, e1);
    let v = dot(dir, q) / det;
    let t = dot(e2, q) / det;
    let w = 1.0 - u - v;
    if u < 0.0 || v < 0.0 || w < 0.0 || t <= 0.0 {
        return None;
    }
    Some((t, u.min(v).min(w)))
}

fn oracle_phong(tri: [V3; 3], eye: V3, m: &PhongMaterial) -> f64 {
    let n = unit(cross(sub(tri[1], tri[0]), sub(tri[2], tri[0])));
    let c = [0, 1, 2].map(|a| (tri[0][a] + tri[1][a] + tri[2][a]) / 3.0);
    let view = unit(sub(eye, c));
    let l = m.light_dir;
    let nl = dot(n, l);
    let mut i = m.ka * m.ambient + m.kd * nl.max(0.0) * m.diffuse;
    if nl > 0.0 {
        let r = [0, 1, 2].map(|a| 2.0 * nl * n[a] - l[a]);
        i += m.ks * dot(r, view).max(0.0).powf(m.shininess) * m.specular;
    }
    i.clamp(0.0, 1.0)
}

fn camera() -> Camera {
    Camera::frontal(32, 32, 3.0)
}

/// Random triangle wound to face the frontal camera.
fn facing_triangle(rng: &mut ChaCha8Rng) -> [V3; 3] {
    let mut t: [V3; 3] =
        std::array::from_fn(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.4..0.4)]);
    if cross(sub(t[1], t[0]), sub(t[2], t[0]))[2] < 0.0 {
        t.swap(1, 2);
    }
    t
}

fn mesh_of(tris: &[[V3; 3]]) -> Mesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for t in tris {
        let b = vertices.len();
        vertices.extend_from_slice(t);
        faces.push([b, b + 1, b + 2]);
    }
    Mesh { vertices, faces }
}

/// Nearest face per pixel by ray casting; `None` marks pixels too close to an edge to call.
fn ray_cast(tris: &[[V3; 3]], cam: &Camera) -> Vec<Option<Option<usize>>> {
    let eye = cam.center();
    let mut out = Vec::new();
    for py in 0..cam.height {
        for px in 0..cam.width {
            let d = cam.ray_direction(px as f64 + 0.5, py as f64 + 0.5);
            let mut best: Option<(f64, usize)> = None;
            let mut ambiguous = false;
            for (f, t) in tris.iter().enumerate() {
                if dot(cross(sub(t[1], t[0]), sub(t[2], t[0])), sub(eye, t[0])) <= 0.0 {
                    continue;
                }
                if let Some((tt, margin)) = hit(eye, d, *t) {
                    if margin < 1e-9 {
                        ambiguous = true;
                    }
                    if best.is_none_or(|(bt, _)| tt < bt) {
                        best = Some((tt, f));
                    }
                }
            }
            out.push(if ambiguous { None } else { Some(best.map(|b| b.1)) });
        }
    }
    out
}

#[test]
fn single_triangle_matches_ray_test_oracle() {
    let cam = camera();
    let m = PhongMaterial::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let tri = facing_triangle(&mut rng);
        let img = phong_shade(&mesh_of(&[tri]), &cam, &m).unwrap();
        let oracle = ray_cast(&[tri], &cam);
        let want = oracle_phong(tri, cam.center(), &m);
        for (i, o) in oracle.iter().enumerate() {
            let Some(o) = o else { continue };
            let v = img.pixel(i / cam.width, i % cam.width);
            let expect = if o.is_some() { want as f32 } else { 0.0 };
            assert!(v.iter().all(|&c| (c - expect).abs() < 1e-6), "pixel {i}: {v:?} vs {expect}");
        }
    }
}

#[test]
fn nearer_triangle_wins_every_contested_pixel() {
    let cam = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut contested = 0;
    for _ in 0..30 {
        let tris = [facing_triangle(&mut rng), facing_triangle(&mut rng)];
        let frags = rasterize(&mesh_of(&tris), &cam);
        let oracle = ray_cast(&tris, &cam);
        let eye = cam.center();
        for (i, o) in oracle.iter().enumerate() {
            let Some(o) = o else { continue };
            assert_eq!(frags.face[i], *o, "pixel {i}");
            let d = cam.ray_direction((i % cam.width) as f64 + 0.5, (i / cam.width) as f64 + 0.5);
            if tris.iter().all(|t| hit(eye, d, *t).is_some()) {
                contested += 1;
            }
        }
    }
    assert!(contested > 100, "scenes barely overlap ({contested} contested pixels)");
}

#[test]
fn ambient_only_material_is_flat() {
    let proxy = make_head_proxy(3, 200, 4).unwrap();
    let m = PhongMaterial { kd: 0.0, ks: 0.0, ka: 0.4, ambient: 0.5, ..PhongMaterial::default() };
    let img = phong_shade(&proxy.base_mesh(), &camera(), &m).unwrap();
    let covered: Vec<f32> = img.data().iter().copied().filter(|&v| v != 0.0).collect();
    assert!(!covered.is_empty());
    assert!(covered.iter().all(|&v| (v - 0.2).abs() < 1e-7));
}

#[test]
fn face_toward_light_is_fully_lit() {
    let tri = [[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0]];
    let m = PhongMaterial { ka: 0.0, ks: 0.0, kd: 1.0, diffuse: 1.0, light_dir: [0.0, 0.0, 1.0], ..PhongMaterial::default() };
    let img = phong_shade(&mesh_of(&[tri]), &camera(), &m).unwrap();
    let [r, _, _] = img.pixel(16, 16);
    assert_eq!(r, 1.0);
}

#[test]
fn deformation_matches_triple_loop() {
    let d = 6;
    let proxy = make_head_proxy(9, 150, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mesh = deform_mesh(&proxy, &ExpressionCoeff::new(c.clone()).unwrap()).unwrap();
    for v in 0..proxy.vertex_count() {
        for a in 0..3 {
            let mut acc = proxy.base_vertices[v][a];
            for k in 0..d {
                acc += proxy.blend_basis[(v * 3 + a) * d + k] * c[k];
            }
            assert!((mesh.vertices[v][a] - acc).abs() < 1e-12);
        }
    }
    assert_eq!(mesh.faces, proxy.faces);
}

#[test]
fn proxies_are_deterministic_and_identity_specific() {
    assert_eq!(make_head_proxy(5, 300, 8).unwrap(), make_head_proxy(5, 300, 8).unwrap());
    let a = make_head_proxy(5, 300, 8).unwrap();
    let b = make_head_proxy(6, 300, 8).unwrap();
    assert!(a.base_vertices.iter().zip(&b.base_vertices).any(|(p, q)| p != q) || a.blend_basis != b.blend_basis);

    let cam = Camera::frontal(48, 48, 3.2);
    let m = PhongMaterial::default();
    let ca = render_appearance(&a, &a.base_mesh(), &cam, &m).unwrap().mean_color();
    let cb = render_appearance(&b, &b.base_mesh(), &cam, &m).unwrap().mean_color();
    let gap: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum();
    assert!(gap > 1e-3, "mean colors {ca:?} vs {cb:?}");
}

#[test]
fn appearance_and_shading_share_coverage() {
    let proxy = make_head_proxy(2, 400, 8).unwrap();
    let cam = Camera::frontal(48, 48, 3.2);
    let m = PhongMaterial::default();
    let mesh = proxy.base_mesh();
    let frags = rasterize(&mesh, &cam);
    let shade = phong_shade(&mesh, &cam, &m).unwrap();
    let app = render_appearance(&proxy, &mesh, &cam, &m).unwrap();
    for (i, f) in frags.face.iter().enumerate() {
        let (y, x) = (i / 48, i % 48);
        if f.is_none() {
            assert_eq!(shade.pixel(y, x), [0.0; 3]);
            assert_eq!(app.pixel(y, x), [0.0; 3]);
        }
    }
    assert_eq!(render_appearance(&proxy, &mesh, &cam, &m).unwrap(), app);
}

#[test]
fn shading_ignores_the_texture() {
    let a = make_head_proxy(2, 300, 8).unwrap();
    let mut b = a.clone();
    b.texture = make_head_proxy(77, 300, 8).unwrap().texture;
    let cam = Camera::frontal(32, 32, 3.2);
    let c = ExpressionCoeff::new(vec![0.3; 8]).unwrap();
    let fa = render_frame(&a, &cam, &PhongMaterial::default(), &c).unwrap();
    let fb = render_frame(&b, &cam, &PhongMaterial::default(), &c).unwrap();
    assert_eq!(fa.shading, fb.shading);
    assert_ne!(fa.appearance, fb.appearance);
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        world_seed: 3,
        identities: vec![1],
        trajectories_per_identity: 2,
        length: 16,
        richness: 3,
        resolution: 64,
        camera_distance: 3.2,
        proxy: ProxyOptions { vertex_budget: 400, expression_dim: 16, zero_basis: false },
        material: PhongMaterial::default(),
        style: TrajectoryStyle::default(),
        holdout_trajectories: 0,
        holdout_richness: None,
    }
}

#[test]
fn dataset_frames_compose_the_renderer() {
    let spec = small_spec();
    let ds = Dataset::generate(&spec).unwrap();
    assert_eq!(ds.sequences.len(), 2);
    assert_eq!(ds.frame_count(), 32);
    let proxy = ds.proxy_for(1).unwrap();
    for seq in &ds.sequences {
        for f in &seq.frames {
            assert_eq!((f.appearance.height(), f.appearance.width()), (64, 64));
            assert_eq!((f.shading.height(), f.shading.width()), (64, 64));
            assert_eq!(f.coeff.dim(), 16);
            let mesh = deform_mesh(&proxy, &f.coeff).unwrap();
            assert_eq!(f.shading, phong_shade(&mesh, &spec.camera(), &spec.material).unwrap().quantized());
        }
    }
}

#[test]
fn dataset_round_trips_exactly_and_regenerates_byte_identical() {
    let spec = small_spec();
    let ds = Dataset::generate(&spec).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ds.save(a.path()).unwrap();
    Dataset::generate(&spec).unwrap().save(b.path()).unwrap();
    assert_eq!(Dataset::load(a.path()).unwrap(), ds);

    let manifest = kinelift::synthworld::read_manifest(a.path()).unwrap();
    let files = kinelift::synthworld::dataset::manifest_files(a.path(), &manifest);
    assert_eq!(files.len(), 2 * (1 + 2 * 16));
    for f in files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn zero_basis_never_deforms() {
    let proxy =
        make_head_proxy_with(4, ProxyOptions { vertex_budget: 100, expression_dim: 5, zero_basis: true }).unwrap();
    let mesh = deform_mesh(&proxy, &ExpressionCoeff::new(vec![3.0, -2.0, 1.0, 0.5, 9.0]).unwrap()).unwrap();
    assert_eq!(mesh, proxy.base_mesh());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deformation_is_linear(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let proxy = make_head_proxy(12, 120, 6).unwrap();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let da = deform_mesh(&proxy, &ExpressionCoeff::new(a).unwrap()).unwrap();
        let db = deform_mesh(&proxy, &ExpressionCoeff::new(b).unwrap()).unwrap();
        let dab = deform_mesh(&proxy, &ExpressionCoeff::new(ab).unwrap()).unwrap();
        for v in 0..proxy.vertex_count() {
            for k in 0..3 {
                let lhs = dab.vertices[v][k];
                let rhs = da.vertices[v][k] + db.vertices[v][k] - proxy.base_vertices[v][k];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn shading_is_bounded_with_black_background(c in prop::collection::vec(-1.5f64..1.5, 8), seed in 0u64..50) {
        let proxy = make_head_proxy(seed, 200, 8).unwrap();
        let mesh = deform_mesh(&proxy, &ExpressionCoeff::new(c).unwrap()).unwrap();
        let cam = camera();
        let img = phong_shade(&mesh, &cam, &PhongMaterial::default()).unwrap();
        let frags = rasterize(&mesh, &cam);
        for (i, f) in frags.face.iter().enumerate() {
            let p = img.pixel(i / 32, i % 32);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if f.is_none() {
                prop_assert_eq!(p, [0.0f32; 3]);
            }
        }
    }
}
