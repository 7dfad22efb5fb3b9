//! Analytic primitive scenes with exact ray casting.
//!
//! These stand in for captured datasets: they render ground-truth depth scans
//! from a camera trajectory and answer visibility queries by direct casting.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DepthScan;
use crate::error::{Error, Result};
use crate::geometry::{ray_to_points, BoundingSphere, Camera, Ray, Vec3};

const MIN_T: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
    /// Square patch of half-width `extent` on the plane `normal·x = offset`,
    /// centered at `offset·normal`.
    Plane { normal: Vec3, offset: f64, extent: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Unit normal facing the incoming ray.
    pub normal: Vec3,
    pub primitive: usize,
}

fn plane_axes(normal: &Vec3) -> (Vec3, Vec3) {
    let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let a = (helper - normal * normal.dot(&helper)).normalize();
    let b = normal.cross(&a);
    (a, b)
}

impl Shape {
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { center, radius } => {
                let q = origin - center;
                let b = dir.dot(&q);
                let c = q.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > MIN_T { -b - s } else { -b + s };
                if t <= MIN_T {
                    return None;
                }
                let p = origin + t * dir;
                Some((t, (p - center) / *radius))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for axis in 0..3 {
                    if dir[axis].abs() < 1e-15 {
                        if origin[axis] < min[axis] || origin[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[axis];
                    let (mut t0, mut t1) = ((min[axis] - origin[axis]) * inv, (max[axis] - origin[axis]) * inv);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = axis;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > MIN_T {
                    (t_near, near_axis)
                } else if t_far > MIN_T {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = -dir[axis].signum();
                Some((t, n))
            }
            Shape::Plane { normal, offset, extent } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                if t <= MIN_T {
                    return None;
                }
                let p = origin + t * dir;
                let rel = p - normal * *offset;
                let (a, b) = plane_axes(normal);
                if rel.dot(&a).abs() > *extent || rel.dot(&b).abs() > *extent {
                    return None;
                }
                Some((t, *normal))
            }
        }
    }

    /// Largest distance from `c` to any point of the shape.
    fn farthest_from(&self, c: &Vec3) -> f64 {
        let corners = |pts: &[Vec3]| pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        match self {
            Shape::Sphere { center, radius } => (center - c).norm() + radius,
            Shape::Box { min, max } => {
                let pts: Vec<Vec3> = (0..8)
                    .map(|i| {
                        Vec3::new(
                            if i & 1 == 0 { min.x } else { max.x },
                            if i & 2 == 0 { min.y } else { max.y },
                            if i & 4 == 0 { min.z } else { max.z },
                        )
                    })
                    .collect();
                corners(&pts)
            }
            Shape::Plane { normal, offset, extent } => {
                let (a, b) = plane_axes(normal);
                let center = normal * *offset;
                let pts: Vec<Vec3> = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                    .iter()
                    .map(|(sa, sb)| center + a * (sa * extent) + b * (sb * extent))
                    .collect();
                corners(&pts)
            }
        }
    }

    /// Signed residual of the shape's implicit equation at `p`.
    pub fn implicit_residual(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { min, max } => {
                // distance to the nearest face plane, for points on the boundary
                let mut best = f64::INFINITY;
                for axis in 0..3 {
                    best = best.min((p[axis] - min[axis]).abs()).min((p[axis] - max[axis]).abs());
                }
                best
            }
            Shape::Plane { normal, offset, .. } => normal.dot(p) - offset,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what, value| Err(Error::Config(format!("{what} must be positive, got {value}")));
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => bad("sphere radius", *radius),
            Shape::Box { min, max } if !(max - min).iter().all(|e| *e > 0.0) => {
                bad("box extent", (max - min).min())
            }
            Shape::Plane { extent, .. } if !(*extent > 0.0) => bad("plane extent", *extent),
            Shape::Plane { normal, .. } if (normal.norm() - 1.0).abs() > 1e-9 => Err(Error::Config(
                "plane normal must be unit length".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub bounding: BoundingSphere,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, bounding: BoundingSphere) -> Result<Self> {
        for (i, prim) in primitives.iter().enumerate() {
            prim.shape.validate()?;
            if prim.shape.farthest_from(&bounding.center) >= bounding.radius() {
                return Err(Error::Config(format!(
                    "primitive {i} is not strictly inside the bounding sphere (D = {})",
                    bounding.diameter
                )));
            }
        }
        Ok(Self { primitives, bounding })
    }

    pub fn empty(bounding: BoundingSphere) -> Self {
        Self {
            primitives: Vec::new(),
            bounding,
        }
    }

    /// Diameter of the smallest sphere about the bounding center that holds
    /// every primitive.
    pub fn circumscribing_diameter(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| 2.0 * p.shape.farthest_from(&self.bounding.center))
            .fold(0.0, f64::max)
    }

    pub fn catalog(name: &str, diameter: f64) -> Result<Self> {
        let bounding = BoundingSphere::new(Vec3::zeros(), diameter)?;
        let sphere = |c: [f64; 3], r: f64, color: [f32; 3]| Primitive {
            shape: Shape::Sphere {
                center: Vec3::from(c),
                radius: r,
            },
            color,
        };
        let aabb = |min: [f64; 3], max: [f64; 3], color: [f32; 3]| Primitive {
            shape: Shape::Box {
                min: Vec3::from(min),
                max: Vec3::from(max),
            },
            color,
        };
        let plane = |n: [f64; 3], offset: f64, color: [f32; 3]| Primitive {
            shape: Shape::Plane {
                normal: Vec3::from(n),
                offset,
                extent: 0.8,
            },
            color,
        };
        let prims = match name {
            "sphere" => vec![sphere([0.0, 0.0, 0.0], 0.6, [0.8, 0.3, 0.3])],
            "two-spheres" => vec![
                sphere([-0.45, 0.0, 0.0], 0.45, [0.8, 0.3, 0.3]),
                sphere([0.5, 0.1, 0.15], 0.35, [0.3, 0.4, 0.8]),
            ],
            "box" => vec![aabb([-0.5; 3], [0.5; 3], [0.7, 0.7, 0.2])],
            "box+sphere" => vec![
                aabb([-0.7, -0.4, -0.3], [-0.1, 0.4, 0.3], [0.7, 0.7, 0.2]),
                sphere([0.45, 0.0, 0.0], 0.4, [0.3, 0.4, 0.8]),
            ],
            "cornell" => vec![
                plane([0.0, 1.0, 0.0], -0.8, [0.8, 0.8, 0.8]),
                plane([0.0, 1.0, 0.0], 0.8, [0.8, 0.8, 0.8]),
                plane([0.0, 0.0, 1.0], 0.8, [0.8, 0.8, 0.8]),
                plane([1.0, 0.0, 0.0], -0.8, [0.8, 0.2, 0.2]),
                plane([1.0, 0.0, 0.0], 0.8, [0.2, 0.8, 0.2]),
                aabb([-0.5, -0.8, 0.0], [-0.1, 0.2, 0.5], [0.9, 0.9, 0.9]),
                aabb([0.1, -0.8, -0.4], [0.55, -0.35, 0.1], [0.9, 0.9, 0.9]),
            ],
            other => return Err(Error::Config(format!("unknown catalog scene {other:?}"))),
        };
        Self::new(prims, bounding)
    }

    pub const CATALOG: [&'static str; 5] = ["sphere", "two-spheres", "box", "box+sphere", "cornell"];

    /// Nearest intersection along `origin + t·direction`, `t > 0`.
    pub fn cast_ray(&self, origin: &Vec3, direction: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = prim.shape.intersect(origin, direction) {
                if best.is_none_or(|b| t < b.t) {
                    let normal = if n.dot(direction) > 0.0 { -n } else { n };
                    best = Some(Hit {
                        t,
                        point: origin + t * direction,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Casts a parameterized ray from its sphere entry point; returns the hit
    /// distance measured from the entry point.
    pub fn cast_parameterized(&self, ray: &Ray) -> Option<(f64, Hit)> {
        let (p_in, _, m) = ray_to_points(ray, &self.bounding).ok()?;
        self.cast_ray(&p_in, &m).map(|h| (h.t, h))
    }

    pub fn render_depth_scan(&self, cam: &Camera, id: u32) -> DepthScan {
        self.render_scan(cam, id, false, None)
    }

    /// Renders a z-depth raster (0 on misses), optionally with per-pixel
    /// primitive colors and additive Gaussian depth noise `(sigma, seed)`.
    pub fn render_scan(&self, cam: &Camera, id: u32, with_color: bool, noise: Option<(f64, u64)>) -> DepthScan {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let forward = cam.rotation.column(2).into_owned();
        let rows: Vec<(Vec<f32>, Vec<[f32; 3]>)> = (0..h)
            .into_par_iter()
            .map(|u| {
                let mut depth = vec![0.0f32; w];
                let mut color = vec![[0.0f32; 3]; if with_color { w } else { 0 }];
                for v in 0..w {
                    let dir = cam.pixel_direction(u as f64, v as f64);
                    if let Some(hit) = self.cast_ray(&cam.origin(), &dir) {
                        depth[v] = (hit.t * dir.dot(&forward)) as f32;
                        if with_color {
                            color[v] = self.primitives[hit.primitive].color;
                        }
                    }
                }
                (depth, color)
            })
            .collect();
        let mut depth: Vec<f32> = Vec::with_capacity(w * h);
        let mut color = Vec::new();
        for (d, c) in rows {
            depth.extend(d);
            color.extend(c);
        }
        if let Some((sigma, seed)) = noise.filter(|(s, _)| *s > 0.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, sigma).expect("finite sigma");
            for d in depth.iter_mut().filter(|d| **d > 0.0) {
                *d = (*d as f64 + dist.sample(&mut rng)).max(1e-6) as f32;
            }
        }
        DepthScan {
            id,
            camera: cam.clone(),
            depth,
            color: with_color.then_some(color),
        }
    }

    /// Ground-truth visibility of `p` (the hit point of `ray1`) along `ray2`.
    pub fn oracle_visibility(&self, _ray1: &Ray, p: &Vec3, ray2: &Ray, epsilon: f64) -> u8 {
        let Ok((p_in, _, m)) = ray_to_points(ray2, &self.bounding) else {
            return 0;
        };
        let expected = (p - p_in).norm();
        match self.cast_ray(&p_in, &m) {
            Some(hit) if (expected - hit.t).abs() <= epsilon => 1,
            _ => 0,
        }
    }

    /// Applies the rigid motion `x ↦ R x + t` to every primitive. Boxes stay
    /// axis-aligned, so only axis-permuting rotations are exact for them.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let shape = match &p.shape {
                    Shape::Sphere { center, radius } => Shape::Sphere {
                        center: rotation * center + translation,
                        radius: *radius,
                    },
                    Shape::Box { min, max } => {
                        let a = rotation * min + translation;
                        let b = rotation * max + translation;
                        Shape::Box {
                            min: a.inf(&b),
                            max: a.sup(&b),
                        }
                    }
                    Shape::Plane { normal, offset, extent } => {
                        let n = rotation * normal;
                        Shape::Plane {
                            normal: n,
                            offset: offset + n.dot(translation),
                            extent: *extent,
                        }
                    }
                };
                Primitive { shape, color: p.color }
            })
            .collect();
        Self {
            primitives,
            bounding: BoundingSphere {
                center: rotation * self.bounding.center + translation,
                diameter: self.bounding.diameter,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Rings of camera poses on a sphere around the look-at target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    pub elevations_deg: Vec<f64>,
    pub azimuth_count: usize,
    pub azimuth_offset_deg: f64,
    /// Azimuth span covered by each ring, degrees (360 for a full orbit).
    pub azimuth_span_deg: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            elevations_deg: vec![0.0],
            azimuth_count: 8,
            azimuth_offset_deg: 0.0,
            azimuth_span_deg: 360.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub radius: f64,
    /// Focal length expressed for a 64-pixel-wide raster; scaled with width.
    pub focal_at_64: f64,
    pub train: OrbitSpec,
    pub test: OrbitSpec,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            radius: 3.0,
            focal_at_64: 88.0,
            train: OrbitSpec {
                elevations_deg: vec![-35.0, -5.0, 25.0, 55.0],
                azimuth_count: 5,
                azimuth_offset_deg: 0.0,
                azimuth_span_deg: 360.0,
            },
            test: OrbitSpec {
                elevations_deg: vec![-20.0, 40.0],
                azimuth_count: 5,
                azimuth_offset_deg: 36.0,
                azimuth_span_deg: 360.0,
            },
        }
    }
}

impl TrajectorySpec {
    /// Front-facing poses for scenes that are only open on the `−z` side.
    pub fn frontal() -> Self {
        let ring = |elevations: Vec<f64>, count, offset| OrbitSpec {
            elevations_deg: elevations,
            azimuth_count: count,
            azimuth_offset_deg: offset,
            azimuth_span_deg: 40.0,
        };
        Self {
            radius: 3.0,
            focal_at_64: 88.0,
            train: ring(vec![-12.0, 0.0, 12.0, 20.0], 5, -20.0),
            test: ring(vec![-6.0, 6.0], 5, -16.0),
        }
    }

    pub fn for_scene(name: &str) -> Self {
        if name == "cornell" {
            Self::frontal()
        } else {
            Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub views: Vec<(Camera, Split)>,
}

impl Trajectory {
    pub fn generate(spec: &TrajectorySpec, target: Vec3, width: u32, height: u32, bounding: &BoundingSphere) -> Result<Self> {
        let focal = spec.focal_at_64 * width as f64 / 64.0;
        let mut views = Vec::new();
        for (orbit, split) in [(&spec.train, Split::Train), (&spec.test, Split::Test)] {
            for (ring, elev) in orbit.elevations_deg.iter().enumerate() {
                let el = elev.to_radians();
                for k in 0..orbit.azimuth_count {
                    let step = orbit.azimuth_span_deg / orbit.azimuth_count as f64;
                    // stagger alternate rings so views do not stack vertically
                    let stagger = if ring % 2 == 1 && orbit.azimuth_span_deg >= 360.0 { 0.5 * step } else { 0.0 };
                    let az = (orbit.azimuth_offset_deg + stagger + step * k as f64).to_radians();
                    // azimuth 0 looks from −z
                    let dir = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos());
                    let eye = target + spec.radius * dir;
                    if bounding.contains_strictly(&eye) || ((eye - bounding.center).norm() - bounding.radius()).abs() < 1e-12 {
                        return Err(Error::Config("camera origin inside the bounding sphere".into()));
                    }
                    let cam = Camera::look_at(eye, target, Vec3::y(), focal, width, height)?;
                    views.push((cam, split));
                }
            }
        }
        for (i, (a, sa)) in views.iter().enumerate() {
            for (b, sb) in &views[i + 1..] {
                if sa != sb && (a.origin() - b.origin()).norm() < 1e-9 {
                    return Err(Error::Config("train and test trajectories share a pose".into()));
                }
            }
        }
        Ok(Self { views })
    }

    pub fn cameras(&self, split: Split) -> impl Iterator<Item = &Camera> {
        self.views.iter().filter(move |(_, s)| *s == split).map(|(c, _)| c)
    }
}

/// Uniform area sampling of the scene surface, used as the reference point
/// cloud for chamfer evaluation. Only surface visible from outside (box and
/// sphere exteriors, both sides of planes) is considered.
pub fn sample_surface(scene: &Scene, count: usize, seed: u64) -> Vec<Vec3> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = scene
        .primitives
        .iter()
        .map(|p| match &p.shape {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Box { min, max } => {
                let e = max - min;
                2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
            }
            Shape::Plane { extent, .. } => 4.0 * extent * extent,
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(count);
    if total <= 0.0 {
        return out;
    }
    while out.len() < count {
        let mut pick = rng.random_range(0.0..total);
        let mut idx = 0;
        while idx + 1 < areas.len() && pick >= areas[idx] {
            pick -= areas[idx];
            idx += 1;
        }
        let p = match &scene.primitives[idx].shape {
            Shape::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(-PI..PI);
                let s = (1.0 - z * z).sqrt();
                center + *radius * Vec3::new(s * phi.cos(), s * phi.sin(), z)
            }
            Shape::Box { min, max } => {
                let e = max - min;
                let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
                let mut f = rng.random_range(0.0..faces.iter().sum::<f64>());
                let mut face = 0;
                while face + 1 < 6 && f >= faces[face] {
                    f -= faces[face];
                    face += 1;
                }
                let mut p = Vec3::new(
                    rng.random_range(min.x..max.x),
                    rng.random_range(min.y..max.y),
                    rng.random_range(min.z..max.z),
                );
                let axis = face / 2;
                p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
                p
            }
            Shape::Plane { normal, offset, extent } => {
                let (a, b) = plane_axes(normal);
                normal * *offset + a * rng.random_range(-extent..*extent) + b * rng.random_range(-extent..*extent)
            }
        };
        out.push(p);
    }
    out
}
