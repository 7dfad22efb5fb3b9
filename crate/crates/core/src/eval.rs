//! Rendering from a trained field and the evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataset::{normalize_ray, DepthScan, VisibilityPair};
use crate::error::{Error, Result};
use crate::geometry::{derive_normal, distance_to_depth, pixel_ray, BoundingSphere, Camera, NormalModel, Ray, Vec3};
use crate::io::{read_file, ByteReader, ByteWriter};
use crate::model::{Classifier, DistanceField};

pub const RASTER_MAGIC: &[u8; 4] = b"RAYI";
const RASTER_VERSION: u32 = 1;
pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 5.0;
const RENDER_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub outlier_threshold: f64,
    pub normal_model: NormalModel,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
            normal_model: NormalModel::FullChain,
        }
    }
}

/// Per-pixel output of a render, row-major. Pixels whose ray misses the
/// bounding sphere are invalid and carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub camera: Camera,
    pub valid: Vec<bool>,
    /// Distance from the sphere entry point, meters.
    pub distance: Vec<f32>,
    /// Camera-frame z-depth, meters.
    pub depth: Vec<f32>,
    pub normal: Vec<[f32; 3]>,
    /// Cross-product norm before normalization.
    pub magnitude: Vec<f32>,
    pub outlier: Vec<bool>,
    /// World-space surface point.
    pub point: Vec<[f32; 3]>,
    pub color: Option<Vec<[f32; 3]>>,
    /// Network rows evaluated for this view.
    pub evaluations: u64,
}

impl RenderedView {
    pub fn pixel_count(&self) -> usize {
        self.valid.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// The raster a perfect field would produce on the scan's hit pixels.
    /// Normals are left zero.
    pub fn from_scan(scan: &DepthScan, sphere: &BoundingSphere) -> Result<Self> {
        let mut view = Self::blank(&scan.camera, scan.color.is_some());
        for i in 0..scan.depth.len() {
            let Some(s) = scan.sample_at(i, sphere)? else {
                continue;
            };
            let p = s.point;
            view.valid[i] = true;
            view.distance[i] = s.distance as f32;
            view.depth[i] = scan.depth[i];
            view.point[i] = [p.x as f32, p.y as f32, p.z as f32];
            if let (Some(out), Some(c)) = (view.color.as_mut(), &scan.color) {
                out[i] = c[i];
            }
        }
        Ok(view)
    }

    fn blank(camera: &Camera, color: bool) -> Self {
        let n = camera.pixel_count();
        Self {
            camera: camera.clone(),
            valid: vec![false; n],
            distance: vec![0.0; n],
            depth: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            magnitude: vec![0.0; n],
            outlier: vec![false; n],
            point: vec![[0.0; 3]; n],
            color: color.then(|| vec![[0.0; 3]; n]),
            evaluations: 0,
        }
    }
}

struct PixelRay {
    index: usize,
    ray: Ray,
    entry: f64,
    input: [f32; 4],
}

/// Renders every pixel of `cam` with one network evaluation per pixel whose
/// ray meets the bounding sphere.
pub fn render_view(field: &DistanceField, cam: &Camera, sphere: &BoundingSphere, opts: &RenderOptions) -> Result<RenderedView> {
    if !(sphere.radius() < (cam.origin() - sphere.center).norm()) {
        return Err(Error::OriginInside);
    }
    let width = cam.width as usize;
    let rays: Vec<PixelRay> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|index| {
            let (u, v) = ((index / width) as f64, (index % width) as f64);
            match pixel_ray(u, v, cam, sphere) {
                Ok((ray, entry)) => Ok(Some(PixelRay {
                    index,
                    ray,
                    entry,
                    input: normalize_ray(&ray)?.to_f32(),
                })),
                Err(Error::NoIntersection) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let before = field.evaluations();
    let chunks: Vec<(Vec<f32>, Array2<f32>, Option<Array2<f32>>)> = rays
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            let x = Array2::from_shape_fn((chunk.len(), 4), |(r, c)| chunk[r].input[c]);
            field.evaluate_with_gradient(x.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluations = field.evaluations() - before;

    let mut view = RenderedView::blank(cam, field.radiance.is_some());
    view.evaluations = evaluations;
    let origin = cam.origin();
    for (chunk, (d, grad, color)) in rays.chunks(RENDER_CHUNK).zip(&chunks) {
        for (k, px) in chunk.iter().enumerate() {
            let i = px.index;
            let d_hat = d[k] as f64;
            let g = [0, 1, 2, 3].map(|c| grad[[k, c]] as f64);
            let dist = d_hat * sphere.diameter;
            let (u, v) = ((i / width) as f64, (i % width) as f64);
            let (_, _, m) = crate::geometry::ray_to_points(&px.ray, sphere)?;
            let p = origin + (px.entry + dist) * m;
            view.valid[i] = true;
            view.distance[i] = dist as f32;
            view.depth[i] = distance_to_depth(dist, u, v, cam, px.entry) as f32;
            view.point[i] = [p.x as f32, p.y as f32, p.z as f32];
            match derive_normal(&px.ray, d_hat, &g, sphere, px.entry, opts.normal_model) {
                Ok(n) => {
                    view.normal[i] = [n.normal.x as f32, n.normal.y as f32, n.normal.z as f32];
                    view.magnitude[i] = n.magnitude as f32;
                    view.outlier[i] = n.magnitude > opts.outlier_threshold;
                }
                Err(Error::DegenerateGradient(_)) => view.outlier[i] = true,
                Err(e) => return Err(e),
            }
            if let (Some(out), Some(c)) = (view.color.as_mut(), color) {
                out[i] = [c[[k, 0]], c[[k, 1]], c[[k, 2]]];
            }
        }
    }
    Ok(view)
}

/// Mean absolute difference over masked pixels, in centimeters.
pub fn ade(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} ground-truth values, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, g), m) in pred.iter().zip(gt).zip(mask) {
        if *m {
            sum += (p - g).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(100.0 * sum / count as f64)
}

/// ADE of a rendered view against a ground-truth scan, over pixels where the
/// scan has a surface hit.
pub fn view_ade(view: &RenderedView, scan: &DepthScan, sphere: &BoundingSphere) -> Result<f64> {
    if view.camera.width != scan.camera.width || view.camera.height != scan.camera.height {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{} vs scan {}x{}",
            view.camera.width, view.camera.height, scan.camera.width, scan.camera.height
        )));
    }
    let n = scan.depth.len();
    let mut gt = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if let Some(s) = scan.sample_at(i, sphere)? {
            gt[i] = s.distance;
            mask[i] = view.valid[i];
        }
    }
    let pred: Vec<f64> = view.distance.iter().map(|d| *d as f64).collect();
    ade(&pred, &gt, &mask)
}

/// Per-view ADE averaged over views.
pub fn mean_ade(per_view: &[f64]) -> Result<f64> {
    if per_view.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(per_view.iter().sum::<f64>() / per_view.len() as f64)
}

/// Renders each scan's camera and returns the mean per-view ADE.
pub fn heldout_ade(field: &DistanceField, scans: &[DepthScan], sphere: &BoundingSphere, opts: &RenderOptions) -> Result<f64> {
    let per_view = scans
        .iter()
        .map(|s| view_ade(&render_view(field, &s.camera, sphere, opts)?, s, sphere))
        .collect::<Result<Vec<_>>>()?;
    mean_ade(&per_view)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chamfer {
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborSearch {
    BruteForce,
    Grid,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

fn brute_nearest(p: &Vec3, set: &[Vec3]) -> f64 {
    set.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min)
}

/// Uniform grid over a point set for exact nearest-neighbor queries.
struct Grid<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = max - min;
        let volume = extent.x.max(1e-9) * extent.y.max(1e-9) * extent.z.max(1e-9);
        let cell = (volume / points.len() as f64).cbrt().max(extent.max() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).min(1024));
        let mut grid = Self {
            points,
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; cells + 1];
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.coords(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn coords(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.min[a]) / self.cell).floor() as i64).clamp(0, self.dims[a] as i64 - 1))
    }

    fn key(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Squared distance from `p` to the box of cells within Chebyshev ring
    /// `r` of `c` is at least this lower bound for anything outside it.
    fn outside_bound(&self, p: &Vec3, c: [i64; 3], r: i64) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            let lo = self.min[a] + (c[a] - r) as f64 * self.cell;
            let hi = self.min[a] + (c[a] + r + 1) as f64 * self.cell;
            if c[a] - r > 0 {
                best = best.min(p[a] - lo);
            }
            if c[a] + r < self.dims[a] as i64 - 1 {
                best = best.min(hi - p[a]);
            }
        }
        if best.is_infinite() {
            best
        } else {
            best.max(0.0).powi(2)
        }
    }

    fn nearest(&self, p: &Vec3) -> f64 {
        let c = self.coords(p);
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().expect("three axes") as i64;
        for r in 0..=max_r {
            for x in (c[0] - r)..=(c[0] + r) {
                for y in (c[1] - r)..=(c[1] + r) {
                    for z in (c[2] - r)..=(c[2] + r) {
                        let on_shell = (x - c[0]).abs() == r || (y - c[1]).abs() == r || (z - c[2]).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        if x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        if x >= self.dims[0] as i64 || y >= self.dims[1] as i64 || z >= self.dims[2] as i64 {
                            continue;
                        }
                        let k = self.key([x, y, z]);
                        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                            best = best.min(dist2(p, &self.points[i]));
                        }
                    }
                }
            }
            let bound = self.outside_bound(p, c, r);
            if best <= bound || bound.is_infinite() {
                break;
            }
        }
        best
    }
}

fn nearest_all(from: &[Vec3], to: &[Vec3], search: NeighborSearch) -> Vec<f64> {
    match search {
        NeighborSearch::BruteForce => from.par_iter().map(|p| brute_nearest(p, to)).collect(),
        NeighborSearch::Grid => {
            let grid = Grid::new(to);
            from.par_iter().map(|p| grid.nearest(p)).collect()
        }
    }
}

fn mean_median(mut v: Vec<f64>) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    (mean, median)
}

/// Symmetric Chamfer distance on squared nearest-neighbor distances: each
/// statistic is averaged over the two directions.
pub fn chamfer_with(a: &[Vec3], b: &[Vec3], search: NeighborSearch) -> Result<Chamfer> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let (mean_ab, median_ab) = mean_median(nearest_all(a, b, search));
    let (mean_ba, median_ba) = mean_median(nearest_all(b, a, search));
    Ok(Chamfer {
        mean: 0.5 * (mean_ab + mean_ba),
        median: 0.5 * (median_ab + median_ba),
    })
}

pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<Chamfer> {
    chamfer_with(a, b, NeighborSearch::Grid)
}

/// Accuracy and positive-class F1, both in percent, at threshold 0.5.
pub fn classification_metrics(scores: &[f32], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptySet);
    }
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= 0.5, *l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = 100.0 * (tp + tn) as f64 / scores.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    };
    Ok((accuracy, f1))
}

/// Scores every pair with the classifier.
pub fn classifier_scores(params: &Classifier, pairs: &[VisibilityPair]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(RENDER_CHUNK) {
        let r1 = Array2::from_shape_fn((chunk.len(), 4), |(r, c)| chunk[r].ray1.0[c] as f32);
        let r2 = Array2::from_shape_fn((chunk.len(), 4), |(r, c)| chunk[r].ray2.0[c] as f32);
        let p = Array2::from_shape_fn((chunk.len(), 3), |(r, c)| chunk[r].point[c] as f32);
        out.extend(params.forward(r1.view(), r2.view(), p.view())?.iter().copied());
    }
    Ok(out)
}

pub fn classifier_metrics(params: &Classifier, pairs: &[VisibilityPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    classification_metrics(&classifier_scores(params, pairs)?, &labels)
}

/// World points of valid, un-flagged pixels, restricted to `mask` when given.
pub fn surface_points(view: &RenderedView, mask: Option<&[bool]>) -> Vec<Vec3> {
    (0..view.pixel_count())
        .filter(|&i| view.valid[i] && !view.outlier[i] && mask.is_none_or(|m| m[i]))
        .map(|i| Vec3::new(view.point[i][0] as f64, view.point[i][1] as f64, view.point[i][2] as f64))
        .collect()
}

/// ASCII PLY with position and normal for every valid, un-flagged pixel, in
/// view order then row-major pixel order. Returns the vertex count.
pub fn export_pointcloud(views: &[RenderedView], path: &Path) -> Result<usize> {
    let mut body = String::new();
    let mut count = 0;
    for view in views {
        for i in 0..view.pixel_count() {
            if !view.valid[i] || view.outlier[i] {
                continue;
            }
            let (p, n) = (view.point[i], view.normal[i]);
            writeln!(body, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]).expect("string write");
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySet);
    }
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    writeln!(text, "element vertex {count}").expect("string write");
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(text, "property float {name}").expect("string write");
    }
    text.push_str("end_header\n");
    text.push_str(&body);
    ByteWriter { buf: text.into_bytes() }.save(path)?;
    Ok(count)
}

const BASE_CHANNELS: u32 = 8;

/// Binary raster: camera, evaluation count, channel count, then per pixel
/// valid, distance, depth, nx, ny, nz, magnitude, outlier (and r, g, b).
pub fn encode_rendered(view: &RenderedView) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(RASTER_MAGIC);
    w.u32(RASTER_VERSION);
    w.camera(&view.camera);
    w.u64(view.evaluations);
    let channels = BASE_CHANNELS + if view.color.is_some() { 3 } else { 0 };
    w.u32(channels);
    for i in 0..view.pixel_count() {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let n = view.normal[i];
        w.f32s(&[
            flag(view.valid[i]),
            view.distance[i],
            view.depth[i],
            n[0],
            n[1],
            n[2],
            view.magnitude[i],
            flag(view.outlier[i]),
        ]);
        if let Some(c) = &view.color {
            w.f32s(&c[i]);
        }
    }
    w.buf
}

pub fn decode_rendered(data: &[u8]) -> Result<RenderedView> {
    let mut r = ByteReader::new(data);
    r.magic(RASTER_MAGIC)?;
    r.version(&[RASTER_VERSION])?;
    let camera = r.camera()?;
    let evaluations = r.u64()?;
    let channels = r.u32()?;
    let has_color = match channels {
        BASE_CHANNELS => false,
        c if c == BASE_CHANNELS + 3 => true,
        c => return Err(Error::ShapeMismatch(format!("unsupported raster channel count {c}"))),
    };
    let mut view = RenderedView::blank(&camera, has_color);
    view.evaluations = evaluations;
    let values = r.f32s(camera.pixel_count() * channels as usize)?;
    for (i, px) in values.chunks_exact(channels as usize).enumerate() {
        view.valid[i] = px[0] != 0.0;
        view.distance[i] = px[1];
        view.depth[i] = px[2];
        view.normal[i] = [px[3], px[4], px[5]];
        view.magnitude[i] = px[6];
        view.outlier[i] = px[7] != 0.0;
        if let Some(c) = view.color.as_mut() {
            c[i] = [px[8], px[9], px[10]];
        }
    }
    if !r.is_empty() {
        return Err(Error::ShapeMismatch("trailing bytes after raster".into()));
    }
    // points are derived data; rebuild them from the stored geometry
    let origin = camera.origin();
    let width = camera.width as usize;
    for i in 0..view.pixel_count() {
        if view.valid[i] {
            let (u, v) = ((i / width) as f64, (i % width) as f64);
            let p = origin + view.depth[i] as f64 * camera.pixel_direction_raw(u, v);
            view.point[i] = [p.x as f32, p.y as f32, p.z as f32];
        }
    }
    Ok(view)
}

pub fn write_rendered(view: &RenderedView, path: &Path) -> Result<()> {
    ByteWriter {
        buf: encode_rendered(view),
    }
    .save(path)
}

pub fn read_rendered(path: &Path) -> Result<RenderedView> {
    decode_rendered(&read_file(path)?)
}

/// 16-bit binary PGM of the depth channel, linearly mapped so the nearest
/// valid depth is 1 and the farthest 65535; invalid pixels are 0. A text
/// sidecar `<path>.txt` records the mapping.
pub fn write_depth_preview(view: &RenderedView, path: &Path) -> Result<()> {
    let valid: Vec<f32> = (0..view.pixel_count())
        .filter(|&i| view.valid[i])
        .map(|i| view.depth[i])
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }
    let lo = valid.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = valid.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = (hi - lo).max(1e-12);
    let mut w = ByteWriter::default();
    w.bytes(format!("P5\n{} {}\n65535\n", view.camera.width, view.camera.height).as_bytes());
    for i in 0..view.pixel_count() {
        let level: u16 = if view.valid[i] {
            (1.0 + 65534.0 * (view.depth[i] as f64 - lo) / span).round() as u16
        } else {
            0
        };
        w.bytes(&level.to_be_bytes());
    }
    w.save(path)?;
    let sidecar = format!(
        "mapping=linear\ndepth_min={lo}\ndepth_max={hi}\nlevel_min=1\nlevel_max=65535\ninvalid_level=0\n"
    );
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    ByteWriter {
        buf: sidecar.into_bytes(),
    }
    .save(Path::new(&side))
}

/// Aggregate metrics. CD values are scaled by 10³.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ade_cm: Option<f64>,
    pub cd_mean: Option<f64>,
    pub cd_median: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Option<f64>| match v {
            Some(v) => writeln!(out, "{k}={v:.6}").expect("string write"),
            None => writeln!(out, "{k}=nan").expect("string write"),
        };
        put("ade_cm", self.ade_cm);
        put("cd_mean_e3", self.cd_mean);
        put("cd_median_e3", self.cd_median);
        put("accuracy", self.accuracy);
        put("f1", self.f1);
        out
    }
}
