//! Checks shared by the integration tests and the acceptance harness. Each
//! returns the measured quantity so callers decide how to report it.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raydf::dataset::{build_visibility_pairs, denormalize_ray, normalize_ray, NormalizedRay};
use raydf::geometry::{
    derive_normal, parameterize_ray, ray_to_points, sample_multiview_rays_with, transformation_residual, BoundingSphere, NormalModel,
    RaySample, Vec3,
};
use raydf::model::{Architecture, Classifier};
use raydf::nn::{Activation, Dense, Mlp};
use raydf::scene::{sample_surface, Scene, Split, Trajectory, TrajectorySpec};

fn objective(net: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (&net.forward(x.view()).unwrap() * w).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A sine first layer followed by a probe layer of the given kind.
pub fn probe_net(kind: Activation, omega: f32, rng: &mut ChaCha8Rng) -> Mlp<f64> {
    let first = Mlp::<f64>::siren_with_seed(&[3, 8], omega, Activation::Sine { omega }, rng.random());
    let bound = match kind {
        Activation::Sine { omega } => (6.0f64 / 8.0).sqrt() / omega as f64,
        _ => 0.5,
    };
    let probe = Dense::<f64> {
        weight: Array2::from_shape_fn((6, 8), |_| rng.random_range(-bound..bound)),
        bias: ndarray::Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5)),
        activation: kind,
    };
    let mut layers = first.layers;
    layers.push(probe);
    Mlp::new(layers).unwrap()
}

/// Largest relative error between backprop and central differences over 10
/// probes each of weight, bias and input gradients.
///
/// Central differences carry a truncation error of about `(ω h)² / 6` through
/// a sine layer, so the step must shrink as the frequency grows.
pub fn gradient_error(kind: Activation, omega: f32, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = probe_net(kind, omega, &mut rng);
    let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-0.5..0.5));
    let w = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
    let (_, tape) = net.forward_train(x.view()).unwrap();
    let (grads, dx) = net.backward(&tape, w.view(), true).unwrap();
    let dx = dx.unwrap();
    let last = net.layers.len() - 1;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (r, c) = (rng.random_range(0..net.layers[last].outputs()), rng.random_range(0..net.layers[last].inputs()));
        let mut plus = net.clone();
        plus.layers[last].weight[[r, c]] += h;
        let mut minus = net.clone();
        minus.layers[last].weight[[r, c]] -= h;
        let fd = (objective(&plus, &x, &w) - objective(&minus, &x, &w)) / (2.0 * h);
        worst = worst.max(rel_err(fd, grads[last].weight[[r, c]]));

        let mut plus = net.clone();
        plus.layers[last].bias[r] += h;
        let mut minus = net.clone();
        minus.layers[last].bias[r] -= h;
        let fd = (objective(&plus, &x, &w) - objective(&minus, &x, &w)) / (2.0 * h);
        worst = worst.max(rel_err(fd, grads[last].bias[r]));

        let (row, col) = (rng.random_range(0..5), rng.random_range(0..3));
        let mut xp = x.clone();
        xp[[row, col]] += h;
        let mut xm = x.clone();
        xm[[row, col]] -= h;
        let fd = (objective(&net, &xp, &w) - objective(&net, &xm, &w)) / (2.0 * h);
        worst = worst.max(rel_err(fd, dx[[row, col]]));
    }
    worst
}

pub fn random_ray(rng: &mut ChaCha8Rng) -> NormalizedRay {
    NormalizedRay([0; 4].map(|_| rng.random_range(-1.0..1.0)))
}

/// Number of random inputs whose scores differ bitwise when the rays swap.
pub fn symmetry_violations(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        hidden: 64,
        layers: 4,
        omega: 30.0,
    };
    let model = Classifier::new(arch, rng.random()).unwrap();
    let r1 = Array2::from_shape_fn((count, 4), |_| rng.random_range(-1.0f32..1.0));
    let r2 = Array2::from_shape_fn((count, 4), |_| rng.random_range(-1.0f32..1.0));
    let p = Array2::from_shape_fn((count, 3), |_| rng.random_range(-1.0f32..1.0));
    let a = model.forward(r1.view(), r2.view(), p.view()).unwrap();
    let b = model.forward(r2.view(), r1.view(), p.view()).unwrap();
    a.iter().zip(b.iter()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

/// Builds `count` co-visible ray pairs by ray casting through sampled surface
/// points and returns the largest transformation residual, meters.
pub fn transformation_suite(scene: &Scene, count: usize, seed: u64) -> f64 {
    let sphere = &scene.bounding;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = sample_surface(scene, count * 4, rng.random());
    let mut worst = 0.0f64;
    let mut built = 0;
    let visible = |p: &Vec3, rng: &mut ChaCha8Rng| -> Option<RaySample> {
        for _ in 0..64 {
            let mv = sample_multiview_rays_with(rng, p, 1, sphere).ok()?[0];
            let (p_in, _, m) = ray_to_points(&mv.ray, sphere).ok()?;
            let hit = scene.cast_ray(&p_in, &m)?;
            if (hit.t - mv.distance).abs() < 1e-9 {
                return RaySample::from_ray(mv.ray, hit.t, 0.0, sphere).ok();
            }
        }
        None
    };
    for p in &points {
        if built == count {
            break;
        }
        let (Some(s1), Some(s2)) = (visible(p, &mut rng), visible(p, &mut rng)) else {
            continue;
        };
        worst = worst.max(transformation_residual(&s1, &s2, sphere));
        built += 1;
    }
    assert_eq!(built, count, "could not build enough co-visible pairs");
    worst
}

#[derive(Clone, Copy, Debug)]
pub enum AnalyticSurface {
    Sphere { center: Vec3, radius: f64 },
    Plane { normal: Vec3, offset: f64 },
}

impl AnalyticSurface {
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match *self {
            AnalyticSurface::Sphere { center, radius } => {
                let q = origin - center;
                let b = dir.dot(&q);
                let disc = b * b - q.norm_squared() + radius * radius;
                (disc >= 0.0).then(|| -b - disc.sqrt()).filter(|t| *t > 0.0)
            }
            AnalyticSurface::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                let t = (offset - normal.dot(origin)) / denom;
                (denom.abs() > 1e-9 && t > 0.0).then_some(t)
            }
        }
    }

    fn normal_at(&self, p: &Vec3) -> Vec3 {
        match *self {
            AnalyticSurface::Sphere { center, radius } => (p - center) / radius,
            AnalyticSurface::Plane { normal, .. } => normal,
        }
    }

    /// The exact field: normalized distance from the entry point.
    fn field(&self, r: &[f64; 4], sphere: &BoundingSphere) -> Option<f64> {
        let ray = denormalize_ray(&NormalizedRay(*r)).ok()?;
        let (p_in, _, m) = ray_to_points(&ray, sphere).ok()?;
        Some(self.hit(&p_in, &m)? / sphere.diameter)
    }
}

/// Largest angle, radians, between derived and analytic normals over `count`
/// rays that hit the surface inside the bounding sphere.
pub fn normal_error(surface: AnalyticSurface, sphere: &BoundingSphere, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < count {
        let eye_dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let Some(eye_dir) = eye_dir.try_normalize(1e-9) else { continue };
        let eye = sphere.center + rng.random_range(1.2..2.5) * sphere.radius() * eye_dir;
        let target = sphere.center
            + 0.5 * sphere.radius() * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = (target - eye).normalize();
        let Ok((ray, entry)) = parameterize_ray(&eye, &dir, sphere) else { continue };
        let Ok(r) = normalize_ray(&ray) else { continue };
        if r.0.iter().any(|v| v.abs() > 1.0 - 1e-3) {
            continue;
        }
        let (p_in, _, m) = ray_to_points(&ray, sphere).unwrap();
        let Some(t) = surface.hit(&p_in, &m) else { continue };
        let p = p_in + t * m;
        if !sphere.contains_strictly(&p) || m.dot(&surface.normal_at(&p)).abs() < 0.05 {
            continue;
        }
        let d_hat = t / sphere.diameter;
        let mut grad = [0.0; 4];
        let mut ok = true;
        for (i, g) in grad.iter_mut().enumerate() {
            let (mut plus, mut minus) = (r.0, r.0);
            plus[i] += h;
            minus[i] -= h;
            match (surface.field(&plus, sphere), surface.field(&minus, sphere)) {
                (Some(a), Some(b)) => *g = (a - b) / (2.0 * h),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let derived = derive_normal(&ray, d_hat, &grad, sphere, entry, NormalModel::FullChain).unwrap().normal;
        let mut truth = surface.normal_at(&p);
        if truth.dot(&(eye - p)) < 0.0 {
            truth = -truth;
        }
        worst = worst.max(derived.dot(&truth).clamp(-1.0, 1.0).acos());
        done += 1;
    }
    worst
}

pub fn analytic_sphere() -> AnalyticSurface {
    AnalyticSurface::Sphere {
        center: Vec3::new(0.1, -0.05, 0.2),
        radius: 0.6,
    }
}

pub fn analytic_plane() -> AnalyticSurface {
    AnalyticSurface::Plane {
        normal: Vec3::new(0.3, 0.8, -0.2).normalize(),
        offset: 0.1,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LabelFidelity {
    pub pairs: usize,
    /// Fraction of raster labels matching a cast along the pair's own target ray.
    pub agreement: f64,
    /// Fraction matching a cast along the exact ray from the target camera
    /// through the hit point.
    pub exact_ray_agreement: f64,
}

/// Compares raster-derived labels against the ray-cast oracle on one catalog
/// scene, 20 views at the given resolution.
pub fn label_fidelity(name: &str, resolution: u32, count: usize, seed: u64) -> LabelFidelity {
    let scene = Scene::catalog(name, 3.0).unwrap();
    let sphere = scene.bounding;
    let traj = Trajectory::generate(&TrajectorySpec::for_scene(name), sphere.center, resolution, resolution, &sphere).unwrap();
    let scans: Vec<_> = traj
        .cameras(Split::Train)
        .enumerate()
        .map(|(i, c)| scene.render_depth_scan(c, i as u32))
        .collect();
    let eps = raydf::dataset::DEFAULT_EPSILON;
    let set = build_visibility_pairs(&scans, &sphere, eps, count, seed).unwrap();
    let n = set.candidates.len();
    let mut agree = 0;
    let mut exact = 0;
    for c in &set.candidates {
        if scene.oracle_visibility(&c.ray1, &c.point, &c.ray2, eps) == c.label {
            agree += 1;
        }
        let eye = scans[c.target.0].camera.origin();
        let truth = match parameterize_ray(&eye, &(c.point - eye).normalize(), &sphere) {
            Ok((ray, _)) => scene.oracle_visibility(&c.ray1, &c.point, &ray, eps),
            Err(_) => 0,
        };
        if truth == c.label {
            exact += 1;
        }
    }
    LabelFidelity {
        pairs: n,
        agreement: agree as f64 / n as f64,
        exact_ray_agreement: exact as f64 / n as f64,
    }
}
