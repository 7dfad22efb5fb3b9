//! Posed depth scans converted into normalized training records.
//!
//! Network inputs are normalized to `[-1, 1]`: latitudes map through
//! `2θ/π − 1`, longitudes through `φ/π`, and points are centered on the
//! bounding sphere and divided by its radius. Distances are divided by the
//! sphere diameter.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    depth_to_distance, pixel_ray, ray_to_points, reproject, BoundingSphere, Camera, Ray, RaySample, Vec3,
};
use crate::io::{read_file, ByteReader, ByteWriter};

pub const SCAN_MAGIC: &[u8; 4] = b"RAYD";
pub const STORE_MAGIC: &[u8; 4] = b"RAYS";
/// Version 1 carries depth only; version 2 appends an RGB block.
const SCAN_VERSIONS: [u32; 2] = [1, 2];
const STORE_VERSIONS: [u32; 2] = [1, 2];

/// Default closeness threshold for visibility labels, meters.
pub const DEFAULT_EPSILON: f64 = 0.010;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthScan {
    pub id: u32,
    pub camera: Camera,
    /// Row-major z-depths in meters; 0 marks a miss.
    pub depth: Vec<f32>,
    pub color: Option<Vec<[f32; 3]>>,
}

impl DepthScan {
    pub fn width(&self) -> usize {
        self.camera.width as usize
    }
    pub fn height(&self) -> usize {
        self.camera.height as usize
    }
    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width() + col]
    }
    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    fn validate(&self) -> Result<()> {
        if self.depth.len() != self.camera.pixel_count() {
            return Err(Error::ShapeMismatch(format!(
                "raster has {} pixels, camera {}x{}",
                self.depth.len(),
                self.camera.height,
                self.camera.width
            )));
        }
        if let Some(bad) = self.depth.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::OutOfRange {
                what: "raw depth",
                value: *bad as f64,
            });
        }
        Ok(())
    }

    /// Converts pixel `index` into a sample, or `None` for sentinel pixels and
    /// pixels whose ray misses the sphere.
    pub fn sample_at(&self, index: usize, sphere: &BoundingSphere) -> Result<Option<RaySample>> {
        let raw = self.depth[index];
        if raw <= 0.0 {
            return Ok(None);
        }
        let (u, v) = ((index / self.width()) as f64, (index % self.width()) as f64);
        let (ray, d0) = match pixel_ray(u, v, &self.camera, sphere) {
            Ok(r) => r,
            Err(Error::NoIntersection) => return Ok(None),
            Err(e) => return Err(e),
        };
        let d = depth_to_distance(raw as f64, u, v, &self.camera, d0)?;
        Ok(Some(RaySample::from_ray(ray, d, d0, sphere)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedRay(pub [f64; 4]);

impl NormalizedRay {
    pub fn to_f32(self) -> [f32; 4] {
        self.0.map(|v| v as f32)
    }
}

pub fn normalize_ray(ray: &Ray) -> Result<NormalizedRay> {
    if !ray.is_valid() {
        let bad = ray
            .to_array()
            .into_iter()
            .find(|v| !v.is_finite() || v.abs() > PI)
            .unwrap_or(ray.theta_in);
        return Err(Error::OutOfRange { what: "ray angle", value: bad });
    }
    Ok(NormalizedRay([
        2.0 * ray.theta_in / PI - 1.0,
        ray.phi_in / PI,
        2.0 * ray.theta_out / PI - 1.0,
        ray.phi_out / PI,
    ]))
}

pub fn denormalize_ray(n: &NormalizedRay) -> Result<Ray> {
    if let Some(bad) = n.0.iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::OutOfRange {
            what: "normalized ray component",
            value: *bad,
        });
    }
    Ok(Ray {
        theta_in: (n.0[0] + 1.0) * PI / 2.0,
        phi_in: n.0[1] * PI,
        theta_out: (n.0[2] + 1.0) * PI / 2.0,
        phi_out: n.0[3] * PI,
    })
}

pub fn normalize_point(p: &Vec3, sphere: &BoundingSphere) -> [f64; 3] {
    let q = (p - sphere.center) / sphere.radius();
    [q.x, q.y, q.z]
}

/// One stored training record; all quantities normalized except `point`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoredSample {
    pub ray: [f32; 4],
    /// `d / D`.
    pub distance: f32,
    /// World-space surface point, meters.
    pub point: [f32; 3],
    pub scan_id: u32,
    pub pixel: u32,
    pub color: Option<[f32; 3]>,
}

impl StoredSample {
    pub fn point_vec(&self) -> Vec3 {
        Vec3::new(self.point[0] as f64, self.point[1] as f64, self.point[2] as f64)
    }
    pub fn ray(&self) -> Result<Ray> {
        denormalize_ray(&NormalizedRay(self.ray.map(|v| v as f64)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    pub sphere: BoundingSphere,
    pub samples: Vec<StoredSample>,
}

impl SampleStore {
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn has_color(&self) -> bool {
        self.samples.first().is_some_and(|s| s.color.is_some())
    }
}

/// Derives an independent stream seed from a parent seed and a salt.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(salt))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Converts every valid pixel of every scan into a normalized sample. With
/// `sparsity < 1` a uniformly random fraction of each scan's valid pixels is
/// kept (shuffled truncation, so the count is exact).
pub fn convert_scans(scans: &[DepthScan], sphere: &BoundingSphere, sparsity: f64, seed: u64) -> Result<SampleStore> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::OutOfRange {
            what: "sparsity",
            value: sparsity,
        });
    }
    let mut samples = Vec::new();
    for scan in scans {
        scan.validate()?;
        if sphere.contains_strictly(&scan.camera.origin()) {
            return Err(Error::OriginInside);
        }
        let converted: Vec<(usize, RaySample)> = (0..scan.depth.len())
            .into_par_iter()
            .map(|i| scan.sample_at(i, sphere).map(|s| s.map(|s| (i, s))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut keep: Vec<usize> = (0..converted.len()).collect();
        if sparsity < 1.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, scan.id as u64 + 1));
            keep.shuffle(&mut rng);
            let n = ((converted.len() as f64) * sparsity).round() as usize;
            keep.truncate(n.max(usize::from(!converted.is_empty())));
            keep.sort_unstable();
        }
        for k in keep {
            let (pixel, s) = &converted[k];
            let d_norm = s.distance / sphere.diameter;
            if d_norm > 1.0 {
                return Err(Error::OutOfRange {
                    what: "normalized distance",
                    value: d_norm,
                });
            }
            samples.push(StoredSample {
                ray: normalize_ray(&s.ray)?.to_f32(),
                distance: d_norm as f32,
                point: [s.point.x as f32, s.point.y as f32, s.point.z as f32],
                scan_id: scan.id,
                pixel: *pixel as u32,
                color: scan.color.as_ref().map(|c| c[*pixel]),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(SampleStore { sphere: *sphere, samples })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityPair {
    pub ray1: NormalizedRay,
    pub ray2: NormalizedRay,
    /// Hit point of `ray1`, normalized to `[-1, 1]³`.
    pub point: [f64; 3],
    pub label: u8,
}

/// A labeled pair together with the full-precision geometry it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCandidate {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub ray1: Ray,
    pub ray2: Ray,
    pub point: Vec3,
    /// Distance from the target ray's entry point to `point`.
    pub d_tilde: f64,
    /// Raster distance along the target ray.
    pub d_target: f64,
    pub label: u8,
}

impl PairCandidate {
    pub fn to_pair(&self, sphere: &BoundingSphere) -> Result<VisibilityPair> {
        Ok(VisibilityPair {
            ray1: normalize_ray(&self.ray1)?,
            ray2: normalize_ray(&self.ray2)?,
            point: normalize_point(&self.point, sphere),
            label: self.label,
        })
    }
}

/// Reprojects the hit point of `scans[source.0]` pixel `source.1` into
/// `scans[target_scan]` and labels the pair. `None` when the point falls
/// behind the camera, out of frame, or on a sentinel pixel.
pub fn pair_candidate(
    scans: &[DepthScan],
    sphere: &BoundingSphere,
    source: (usize, usize),
    target_scan: usize,
    epsilon: f64,
) -> Result<Option<PairCandidate>> {
    let Some(s1) = scans[source.0].sample_at(source.1, sphere)? else {
        return Ok(None);
    };
    pair_from_sample(scans, sphere, source, &s1, target_scan, epsilon)
}

fn pair_from_sample(
    scans: &[DepthScan],
    sphere: &BoundingSphere,
    source: (usize, usize),
    s1: &RaySample,
    target_scan: usize,
    epsilon: f64,
) -> Result<Option<PairCandidate>> {
    let target = &scans[target_scan];
    let proj = match reproject(&s1.point, &target.camera) {
        Ok(p) => p,
        Err(Error::BehindCamera(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let Some((row, col)) = proj.nearest_pixel(&target.camera) else {
        return Ok(None);
    };
    let index = row as usize * target.width() + col as usize;
    let Some(s2) = target.sample_at(index, sphere)? else {
        return Ok(None);
    };
    let (p_in2, _, _) = ray_to_points(&s2.ray, sphere)?;
    let d_tilde = (s1.point - p_in2).norm();
    let label = u8::from((d_tilde - s2.distance).abs() <= epsilon);
    Ok(Some(PairCandidate {
        source,
        target: (target_scan, index),
        ray1: s1.ray,
        ray2: s2.ray,
        point: s1.point,
        d_tilde,
        d_target: s2.distance,
        label,
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub candidates: Vec<PairCandidate>,
    pub pairs: Vec<VisibilityPair>,
    pub positive_fraction: f64,
}

/// Builds up to `budget` labeled ray pairs by reprojecting hit points across
/// scans. (source pixel, target scan) combinations are visited in a seeded
/// random order; combinations that fail to reproject are skipped.
pub fn build_visibility_pairs(
    scans: &[DepthScan],
    sphere: &BoundingSphere,
    epsilon: f64,
    budget: usize,
    seed: u64,
) -> Result<PairSet> {
    if scans.len() < 2 {
        return Err(Error::InsufficientScans(scans.len()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange {
            what: "epsilon",
            value: epsilon,
        });
    }
    let k = scans.len();
    let mut sources: Vec<(usize, usize, RaySample)> = Vec::new();
    for (si, scan) in scans.iter().enumerate() {
        scan.validate()?;
        let found: Vec<(usize, usize, RaySample)> = (0..scan.depth.len())
            .into_par_iter()
            .map(|i| scan.sample_at(i, sphere).map(|s| s.map(|s| (si, i, s))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        sources.extend(found);
    }
    let total = sources.len() * (k - 1);
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut candidates = Vec::with_capacity(budget.min(total));
    // evaluate in chunks so the parallel map stays deterministic and bounded
    for chunk in order.chunks(4096) {
        if candidates.len() >= budget {
            break;
        }
        let found: Vec<Option<PairCandidate>> = chunk
            .par_iter()
            .map(|&combo| {
                let (src, other) = (combo as usize / (k - 1), combo as usize % (k - 1));
                let (si, pixel, sample) = &sources[src];
                let target = if other >= *si { other + 1 } else { other };
                pair_from_sample(scans, sphere, (*si, *pixel), sample, target, epsilon)
            })
            .collect::<Result<Vec<_>>>()?;
        for c in found.into_iter().flatten() {
            if candidates.len() < budget {
                candidates.push(c);
            }
        }
    }
    let pairs = candidates
        .iter()
        .map(|c| c.to_pair(sphere))
        .collect::<Result<Vec<_>>>()?;
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    let positive_fraction = if pairs.is_empty() {
        0.0
    } else {
        positives as f64 / pairs.len() as f64
    };
    Ok(PairSet {
        candidates,
        pairs,
        positive_fraction,
    })
}

pub fn write_scan(scan: &DepthScan, path: &Path) -> Result<()> {
    scan.validate()?;
    let mut w = ByteWriter::default();
    w.bytes(SCAN_MAGIC);
    w.u32(if scan.color.is_some() { 2 } else { 1 });
    w.camera(&scan.camera);
    w.f32s(&scan.depth);
    if let Some(color) = &scan.color {
        for c in color {
            w.f32s(c);
        }
    }
    w.save(path)
}

/// Reads a scan file. The format carries no id, so the caller supplies one.
pub fn read_scan(path: &Path, id: u32) -> Result<DepthScan> {
    decode_scan(&read_file(path)?, id)
}

pub(crate) fn decode_scan(data: &[u8], id: u32) -> Result<DepthScan> {
    let mut r = ByteReader::new(data);
    r.magic(SCAN_MAGIC)?;
    let version = r.version(&SCAN_VERSIONS)?;
    let camera = r.camera()?;
    let n = camera.pixel_count();
    let depth = r.f32s(n)?;
    let color = if version == 2 {
        let flat = r.f32s(3 * n)?;
        Some(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    } else {
        None
    };
    let scan = DepthScan {
        id,
        camera,
        depth,
        color,
    };
    scan.validate()?;
    Ok(scan)
}

pub fn write_store(store: &SampleStore, path: &Path) -> Result<()> {
    let with_color = store.has_color();
    let mut w = ByteWriter::default();
    w.bytes(STORE_MAGIC);
    w.u32(if with_color { 2 } else { 1 });
    for i in 0..3 {
        w.f64(store.sphere.center[i]);
    }
    w.f64(store.sphere.diameter);
    w.u64(store.samples.len() as u64);
    for s in &store.samples {
        w.f32s(&s.ray);
        w.f32(s.distance);
        w.f32s(&s.point);
        w.u32(s.scan_id);
        w.u32(s.pixel);
        if with_color {
            w.f32s(&s.color.unwrap_or([0.0; 3]));
        }
    }
    w.save(path)
}

pub fn read_store(path: &Path) -> Result<SampleStore> {
    decode_store(&read_file(path)?)
}

pub(crate) fn decode_store(data: &[u8]) -> Result<SampleStore> {
    let mut r = ByteReader::new(data);
    r.magic(STORE_MAGIC)?;
    let version = r.version(&STORE_VERSIONS)?;
    let center = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let sphere = BoundingSphere::new(center, r.f64()?)?;
    let count = r.u64()? as usize;
    let mut samples = Vec::with_capacity(count.min(data.len() / 44));
    for _ in 0..count {
        let ray = r.f32s(4)?;
        let distance = r.f32()?;
        let point = r.f32s(3)?;
        let scan_id = r.u32()?;
        let pixel = r.u32()?;
        let color = if version == 2 {
            let c = r.f32s(3)?;
            Some([c[0], c[1], c[2]])
        } else {
            None
        };
        samples.push(StoredSample {
            ray: [ray[0], ray[1], ray[2], ray[3]],
            distance,
            point: [point[0], point[1], point[2]],
            scan_id,
            pixel,
            color,
        });
    }
    Ok(SampleStore { sphere, samples })
}
