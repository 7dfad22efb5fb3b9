//! Closed-form ray geometry.
//!
//! Rays are encoded by the spherical angles of their two intersections with a
//! fixed bounding sphere. Angles follow `x = sinθ cosφ`, `y = sinθ sinφ`,
//! `z = cosθ` with `θ ∈ [0, π]` and `φ ∈ (−π, π]`.
//!
//! Cameras map world points through `p_cam = Rᵀ (p − t)`; pixel `(u, v)` is
//! (row, column), so `u` pairs with `c_y` and `v` with `c_x`. The camera looks
//! along its local `+z` axis with `+x` to the right and `+y` down.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Step used for the finite-difference Jacobian of the ray parameterization.
pub const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingSphere {
    pub center: Vec3,
    pub diameter: f64,
}

impl BoundingSphere {
    pub fn new(center: Vec3, diameter: f64) -> Result<Self> {
        if !(diameter > 0.0) || !diameter.is_finite() {
            return Err(Error::OutOfRange {
                what: "sphere diameter",
                value: diameter,
            });
        }
        Ok(Self { center, diameter })
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn contains_strictly(&self, p: &Vec3) -> bool {
        (p - self.center).norm() < self.radius()
    }

    /// Unit-sphere angles `(θ, φ)` of a point on (or near) the sphere.
    pub fn angles_of(&self, p: &Vec3) -> (f64, f64) {
        let q = p - self.center;
        let theta = q.xy().norm().atan2(q.z);
        let mut phi = q.y.atan2(q.x);
        if phi <= -PI {
            phi += 2.0 * PI;
        }
        (theta, phi)
    }

    pub fn point_at(&self, theta: f64, phi: f64) -> Vec3 {
        self.center + self.radius() * unit_direction(theta, phi)
    }
}

/// `(sinθ cosφ, sinθ sinφ, cosθ)`.
pub fn unit_direction(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Two-sphere parameterization of an oriented line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub theta_in: f64,
    pub phi_in: f64,
    pub theta_out: f64,
    pub phi_out: f64,
}

impl Ray {
    pub fn from_points(p_in: &Vec3, p_out: &Vec3, sphere: &BoundingSphere) -> Self {
        let (theta_in, phi_in) = sphere.angles_of(p_in);
        let (theta_out, phi_out) = sphere.angles_of(p_out);
        Self {
            theta_in,
            phi_in,
            theta_out,
            phi_out,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.theta_in, self.phi_in, self.theta_out, self.phi_out]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            theta_in: a[0],
            phi_in: a[1],
            theta_out: a[2],
            phi_out: a[3],
        }
    }

    pub fn is_valid(&self) -> bool {
        let theta_ok = |t: f64| (0.0..=PI).contains(&t);
        let phi_ok = |p: f64| p > -PI && p <= PI;
        theta_ok(self.theta_in)
            && theta_ok(self.theta_out)
            && phi_ok(self.phi_in)
            && phi_ok(self.phi_out)
    }
}

/// Pinhole camera. `rotation` maps camera axes to world axes and
/// `translation` is the camera origin in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vec3,
        focal: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 || (rotation.transpose() * rotation - Matrix3::identity()).norm() > 1e-9 {
            return Err(Error::OutOfRange {
                what: "rotation determinant",
                value: det,
            });
        }
        if !(focal > 0.0) {
            return Err(Error::OutOfRange {
                what: "focal length",
                value: focal,
            });
        }
        if !(cx > 0.0 && cx < width as f64) {
            return Err(Error::OutOfRange {
                what: "principal point c_x",
                value: cx,
            });
        }
        if !(cy > 0.0 && cy < height as f64) {
            return Err(Error::OutOfRange {
                what: "principal point c_y",
                value: cy,
            });
        }
        Ok(Self {
            rotation,
            translation,
            focal,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the raster center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(Error::OutOfRange {
                what: "look-at distance",
                value: 0.0,
            })?;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // looking along `up`; any perpendicular reference will do
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(
            rotation,
            eye,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn origin(&self) -> Vec3 {
        self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unnormalized back-projected direction `R K⁻¹ (v, u, 1)`.
    pub fn pixel_direction_raw(&self, u: f64, v: f64) -> Vec3 {
        let local = Vec3::new((v - self.cx) / self.focal, (u - self.cy) / self.focal, 1.0);
        self.rotation * local
    }

    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        self.pixel_direction_raw(u, v).normalize()
    }

    /// Ratio of along-ray range to z-depth for pixel `(u, v)`.
    pub fn obliquity(&self, u: f64, v: f64) -> f64 {
        let du = u - self.cy;
        let dv = v - self.cx;
        (du * du + dv * dv + self.focal * self.focal).sqrt() / self.focal
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// A converted training record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub ray: Ray,
    /// Distance from the sphere entry point to the surface, meters.
    pub distance: f64,
    pub point: Vec3,
    /// Distance from the camera origin to the sphere entry point, meters.
    pub entry_offset: f64,
}

impl RaySample {
    pub fn from_ray(ray: Ray, distance: f64, entry_offset: f64, sphere: &BoundingSphere) -> Result<Self> {
        let (p_in, _, m) = ray_to_points(&ray, sphere)?;
        Ok(Self {
            ray,
            distance,
            point: p_in + distance * m,
            entry_offset,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalResult {
    pub normal: Vec3,
    /// Norm of the cross product before normalization, with the common `D²`
    /// factor removed.
    pub magnitude: f64,
}

/// Entry and exit parameters `t_in <= t_out` of `origin + t·direction`.
fn sphere_hits(origin: &Vec3, direction: &Vec3, sphere: &BoundingSphere) -> Result<(f64, f64)> {
    let q = origin - sphere.center;
    let r = sphere.radius();
    let b = direction.dot(&q);
    let c = q.norm_squared() - r * r;
    if c < 0.0 {
        return Err(Error::OriginInside);
    }
    let disc = b * b - c;
    if disc <= 0.0 {
        return Err(Error::NoIntersection);
    }
    let s = disc.sqrt();
    let (t_in, t_out) = (-b - s, -b + s);
    if t_out <= 0.0 {
        return Err(Error::NoIntersection);
    }
    Ok((t_in.max(0.0), t_out))
}

/// Parameterizes the ray `origin + t·direction` against `sphere`, returning the
/// ray and the offset from `origin` to the sphere entry point.
pub fn parameterize_ray(origin: &Vec3, direction: &Vec3, sphere: &BoundingSphere) -> Result<(Ray, f64)> {
    let (t_in, t_out) = sphere_hits(origin, direction, sphere)?;
    let p_in = origin + t_in * direction;
    let p_out = origin + t_out * direction;
    Ok((Ray::from_points(&p_in, &p_out, sphere), t_in))
}

/// Entry point, exit point and unit direction of a parameterized ray.
pub fn ray_to_points(ray: &Ray, sphere: &BoundingSphere) -> Result<(Vec3, Vec3, Vec3)> {
    let p_in = sphere.point_at(ray.theta_in, ray.phi_in);
    let p_out = sphere.point_at(ray.theta_out, ray.phi_out);
    let chord = p_out - p_in;
    let len = chord.norm();
    if len <= 1e-12 {
        return Err(Error::DegenerateRay);
    }
    Ok((p_in, p_out, chord / len))
}

/// Converts a raw z-depth at pixel `(u, v)` into the distance measured from the
/// sphere entry point.
pub fn depth_to_distance(raw_depth: f64, u: f64, v: f64, cam: &Camera, entry_offset: f64) -> Result<f64> {
    if !(raw_depth > 0.0) {
        return Err(Error::OutOfRange {
            what: "raw depth",
            value: raw_depth,
        });
    }
    if entry_offset < 0.0 {
        return Err(Error::OutOfRange {
            what: "entry offset",
            value: entry_offset,
        });
    }
    let d = raw_depth * cam.obliquity(u, v) - entry_offset;
    if d < 0.0 {
        return Err(Error::NegativeResult(d));
    }
    Ok(d)
}

/// Inverse of [`depth_to_distance`].
pub fn distance_to_depth(distance: f64, u: f64, v: f64, cam: &Camera, entry_offset: f64) -> f64 {
    (distance + entry_offset) / cam.obliquity(u, v)
}

pub fn pixel_ray(u: f64, v: f64, cam: &Camera, sphere: &BoundingSphere) -> Result<(Ray, f64)> {
    parameterize_ray(&cam.origin(), &cam.pixel_direction(u, v), sphere)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    /// Continuous row coordinate.
    pub u: f64,
    /// Continuous column coordinate.
    pub v: f64,
    pub depth: f64,
    pub in_frame: bool,
}

impl Reprojection {
    /// Nearest raster pixel `(row, col)`, if inside the frame.
    pub fn nearest_pixel(&self, cam: &Camera) -> Option<(u32, u32)> {
        let (row, col) = (self.u.round(), self.v.round());
        if row >= 0.0 && col >= 0.0 && row < cam.height as f64 && col < cam.width as f64 {
            Some((row as u32, col as u32))
        } else {
            None
        }
    }
}

pub fn reproject(p: &Vec3, cam: &Camera) -> Result<Reprojection> {
    let local = cam.world_to_camera(p);
    if local.z <= 0.0 {
        return Err(Error::BehindCamera(local.z));
    }
    let u = cam.focal * local.y / local.z + cam.cy;
    let v = cam.focal * local.x / local.z + cam.cx;
    let in_frame = u >= 0.0 && v >= 0.0 && u <= (cam.height - 1) as f64 && v <= (cam.width - 1) as f64;
    Ok(Reprojection {
        u,
        v,
        depth: local.z,
        in_frame,
    })
}

/// A ray through an interior point, as produced by multi-view sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiViewRay {
    pub ray: Ray,
    /// Distance from the sphere entry point to the interior point.
    pub distance: f64,
    pub direction: Vec3,
}

/// Draws `count` rays through `p` with directions uniform on the unit sphere.
pub fn sample_multiview_rays(p: &Vec3, count: usize, sphere: &BoundingSphere, seed: u64) -> Result<Vec<MultiViewRay>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_multiview_rays_with(&mut rng, p, count, sphere)
}

pub fn sample_multiview_rays_with<R: Rng + ?Sized>(
    rng: &mut R,
    p: &Vec3,
    count: usize,
    sphere: &BoundingSphere,
) -> Result<Vec<MultiViewRay>> {
    if !sphere.contains_strictly(p) {
        return Err(Error::PointOutsideSphere);
    }
    let q = p - sphere.center;
    let r = sphere.radius();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let g = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let Some(w) = g.try_normalize(1e-12) else {
            continue;
        };
        let b = w.dot(&q);
        let root = (b * b - q.norm_squared() + r * r).sqrt();
        let back = b + root;
        let forward = root - b;
        let p_in = p - back * w;
        let p_out = p + forward * w;
        // grazing entry makes the chord ill-conditioned
        let n_in = (p_in - sphere.center) / r;
        if w.dot(&n_in).abs() < 1e-6 {
            continue;
        }
        out.push(MultiViewRay {
            ray: Ray::from_points(&p_in, &p_out, sphere),
            distance: back,
            direction: w,
        });
    }
    Ok(out)
}

/// Distance between the surface points named by two samples.
pub fn transformation_residual(s1: &RaySample, s2: &RaySample, sphere: &BoundingSphere) -> f64 {
    let point = |s: &RaySample| match ray_to_points(&s.ray, sphere) {
        Ok((p_in, _, m)) => p_in + s.distance * m,
        Err(_) => s.point,
    };
    (point(s1) - point(s2)).norm()
}

/// How the entry offset `d0` enters the normal derivation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalModel {
    /// Differentiate the full radius `D·d̂ + d0`, including the motion of the
    /// sphere entry point as the viewing direction changes.
    #[default]
    FullChain,
    /// Treat `d0` as a constant, differentiating only `D·d̂`.
    FixedEntryOffset,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Orthonormal frame whose first row is `m`.
fn ray_frame(m: &Vec3) -> Matrix3<f64> {
    let helper = if m.x.abs() < 0.6 { Vec3::x() } else { Vec3::y() };
    let a = (helper - m * m.dot(&helper)).normalize();
    let b = m.cross(&a);
    Matrix3::from_rows(&[m.transpose(), a.transpose(), b.transpose()])
}

/// Surface normal of the point predicted at normalized distance `d_hat` along
/// `ray`, given the gradient of `d_hat` with respect to the normalized ray
/// inputs.
///
/// The viewing direction is parameterized in a frame where it sits on the
/// equator, so the derivation has no pole singularity. The returned normal
/// faces the camera.
pub fn derive_normal(
    ray: &Ray,
    d_hat: f64,
    grad: &[f64; 4],
    sphere: &BoundingSphere,
    entry_offset: f64,
    model: NormalModel,
) -> Result<NormalResult> {
    let (p_in, _, m) = ray_to_points(ray, sphere)?;
    let origin = p_in - entry_offset * m;
    let frame = ray_frame(&m);
    let to_world = frame.transpose();

    let eval = |theta: f64, phi: f64| -> Result<([f64; 4], f64)> {
        let dir = to_world * unit_direction(theta, phi);
        let (r, d0) = parameterize_ray(&origin, &dir, sphere)?;
        Ok((r.to_array(), d0))
    };
    let h = JACOBIAN_STEP;
    let half_pi = 0.5 * PI;
    let (tp, d0_tp) = eval(half_pi + h, 0.0)?;
    let (tm, d0_tm) = eval(half_pi - h, 0.0)?;
    let (pp, d0_pp) = eval(half_pi, h)?;
    let (pm, d0_pm) = eval(half_pi, -h)?;

    // derivative of the normalized inputs (2θ/π − 1, φ/π, ...)
    let scale = [2.0 / PI, 1.0 / PI, 2.0 / PI, 1.0 / PI];
    let dr = |plus: &[f64; 4], minus: &[f64; 4]| -> [f64; 4] {
        let mut out = [0.0; 4];
        for i in 0..4 {
            let diff = if i % 2 == 1 {
                wrap_angle(plus[i] - minus[i])
            } else {
                plus[i] - minus[i]
            };
            out[i] = scale[i] * diff / (2.0 * h);
        }
        out
    };
    let dot = |a: &[f64; 4]| -> f64 { a.iter().zip(grad).map(|(x, g)| x * g).sum() };
    let mut a_theta = dot(&dr(&tp, &tm));
    let mut a_phi = dot(&dr(&pp, &pm));
    if model == NormalModel::FullChain {
        a_theta += (d0_tp - d0_tm) / (2.0 * h) / sphere.diameter;
        a_phi += (d0_pp - d0_pm) / (2.0 * h) / sphere.diameter;
    }
    let rho = d_hat + entry_offset / sphere.diameter;

    // Both partials of Φ(θ, φ) = R·(sinθcosφ, sinθsinφ, cosθ), evaluated at
    // θ = π/2, φ = 0 and divided by D.
    let (st, ct) = (1.0_f64, 0.0_f64);
    let (sp, cp) = (0.0_f64, 1.0_f64);
    let d_phi = Vec3::new(
        (a_phi * cp - rho * sp) * st,
        (a_phi * sp + rho * cp) * st,
        a_phi * ct,
    );
    let d_theta = Vec3::new(
        (a_theta * st + rho * ct) * cp,
        (a_theta * st + rho * ct) * sp,
        a_theta * ct - rho * st,
    );
    let cross = d_phi.cross(&d_theta);
    let magnitude = cross.norm();
    if !(magnitude >= 1e-12) {
        return Err(Error::DegenerateGradient(magnitude));
    }
    Ok(NormalResult {
        normal: to_world * (cross / magnitude),
        magnitude,
    })
}
