//! Pipeline commands behind the `raydf` binary. The in-memory stages
//! (`build_dataset`, `train_classifier_stage`, ...) are public so tests and
//! bindings can drive the same pipeline without touching disk.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{seeds, RunConfig};
use crate::dataset::{build_visibility_pairs, convert_scans, read_scan, read_store, sub_seed, write_scan, write_store, DepthScan, PairSet, SampleStore};
use crate::error::{Error, Result};
use crate::eval::{
    chamfer, classifier_metrics, export_pointcloud, read_rendered, render_view, surface_points, view_ade, write_depth_preview,
    write_rendered, MetricReport, RenderOptions, RenderedView,
};
use crate::geometry::Vec3;
use crate::model::{Classifier, DistanceField};
use crate::scene::{sample_surface, Scene, Split, Trajectory};
use crate::training::{train_classifier, train_distance, ClassifierReport, DistanceReport, LossNorm, VisibilityScorer};

pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
pub const MANIFEST: &str = "manifest.sha256";
pub const METRICS: &str = "metrics.txt";
const LOCK: &str = ".lock";

/// Process exit status for an error: 1 usage/config, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::NonFiniteLoss { .. }
        | Error::NonFiniteGradient
        | Error::DomainError(_)
        | Error::NegativeResult(_)
        | Error::DegenerateGradient(_) => 3,
        _ => 2,
    }
}

/// Ground-truth scans and the converted training store.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: Scene,
    pub train: Vec<DepthScan>,
    pub test: Vec<DepthScan>,
    /// Scans used to build visibility pairs; the train/test scans unless a
    /// separate pair resolution is configured.
    pub pair_train: Vec<DepthScan>,
    pub pair_test: Vec<DepthScan>,
    pub store: SampleStore,
}

fn render_split(cfg: &RunConfig, scene: &Scene, traj: &Trajectory, split: Split, first_id: u32) -> Vec<DepthScan> {
    let noise_seed = sub_seed(cfg.seed, seeds::DATA);
    traj.cameras(split)
        .enumerate()
        .map(|(i, cam)| {
            let id = first_id + i as u32;
            let noise = (cfg.render.depth_noise > 0.0).then(|| (cfg.render.depth_noise, sub_seed(noise_seed, id as u64)));
            scene.render_scan(cam, id, cfg.render.color, noise)
        })
        .collect()
}

fn split_scans(cfg: &RunConfig, scene: &Scene, width: u32, height: u32) -> Result<(Vec<DepthScan>, Vec<DepthScan>)> {
    let traj = Trajectory::generate(&cfg.trajectory_spec(), scene.bounding.center, width, height, &scene.bounding)?;
    let train = render_split(cfg, scene, &traj, Split::Train, 0);
    let test = render_split(cfg, scene, &traj, Split::Test, train.len() as u32);
    Ok((train, test))
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let (train, test) = split_scans(cfg, &scene, cfg.render.width, cfg.render.height)?;
    let (pw, ph) = cfg.pair_resolution();
    let (pair_train, pair_test) = if (pw, ph) == (cfg.render.width, cfg.render.height) {
        (train.clone(), test.clone())
    } else {
        split_scans(cfg, &scene, pw, ph)?
    };
    let store = convert_scans(&train, &scene.bounding, cfg.data.sparsity, sub_seed(cfg.seed, seeds::DATA))?;
    Ok(Dataset {
        scene,
        train,
        test,
        pair_train,
        pair_test,
        store,
    })
}

fn scan_path(dir: &Path, prefix: &str, i: usize) -> PathBuf {
    dir.join("scans").join(format!("{prefix}_{i:03}.rayd"))
}

fn separate_pairs(cfg: &RunConfig) -> bool {
    cfg.pair_resolution() != (cfg.render.width, cfg.render.height)
}

pub fn write_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let dir = &cfg.out;
    let mut groups = vec![("train", &data.train), ("test", &data.test)];
    if separate_pairs(cfg) {
        groups.push(("pairs_train", &data.pair_train));
        groups.push(("pairs_test", &data.pair_test));
    }
    for (prefix, scans) in groups {
        for (i, scan) in scans.iter().enumerate() {
            write_scan(scan, &scan_path(dir, prefix, i))?;
        }
    }
    write_store(&data.store, &dir.join("store.rays"))
}

/// Reads what `generate` wrote to the output directory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let scene = cfg.scene()?;
    let spec = cfg.trajectory_spec();
    let n_train = spec.train.elevations_deg.len() * spec.train.azimuth_count;
    let n_test = spec.test.elevations_deg.len() * spec.test.azimuth_count;
    let dir = &cfg.out;
    let read = |prefix: &str, n: usize, first: usize| -> Result<Vec<DepthScan>> {
        (0..n).map(|i| read_scan(&scan_path(dir, prefix, i), (first + i) as u32)).collect()
    };
    let train = read("train", n_train, 0)?;
    let test = read("test", n_test, n_train)?;
    let (pair_train, pair_test) = if separate_pairs(cfg) {
        (read("pairs_train", n_train, 0)?, read("pairs_test", n_test, n_train)?)
    } else {
        (train.clone(), test.clone())
    };
    let store = read_store(&dir.join("store.rays"))?;
    Ok(Dataset {
        scene,
        train,
        test,
        pair_train,
        pair_test,
        store,
    })
}

pub fn classifier_pairs(cfg: &RunConfig, data: &Dataset) -> Result<PairSet> {
    build_visibility_pairs(
        &data.pair_train,
        &data.scene.bounding,
        cfg.classifier.epsilon,
        cfg.classifier.pair_budget,
        sub_seed(cfg.seed, seeds::PAIRS),
    )
}

pub fn train_classifier_stage(cfg: &RunConfig, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<(Classifier, ClassifierReport)> {
    let pairs = classifier_pairs(cfg, data)?;
    let mut cc = cfg.classifier_config();
    cc.checkpoint_dir = checkpoint_dir.map(Path::to_path_buf);
    train_classifier(&pairs.pairs, &cc)
}

pub fn train_distance_stage(
    cfg: &RunConfig,
    store: &SampleStore,
    classifier: Option<&Classifier>,
    checkpoint_dir: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<(DistanceField, DistanceReport)> {
    let mut dc = cfg.distance_config();
    dc.checkpoint_dir = checkpoint_dir.map(Path::to_path_buf);
    let scorer = classifier.filter(|_| dc.m > 0).map(|c| c as &dyn VisibilityScorer);
    train_distance(store, scorer, &dc, log)
}

pub fn render_options(cfg: &RunConfig) -> RenderOptions {
    RenderOptions {
        outlier_threshold: cfg.eval.outlier_threshold,
        ..RenderOptions::default()
    }
}

pub fn render_scans(cfg: &RunConfig, field: &DistanceField, scans: &[DepthScan], sphere: &crate::geometry::BoundingSphere) -> Result<Vec<RenderedView>> {
    let opts = render_options(cfg);
    scans.iter().map(|s| render_view(field, &s.camera, sphere, &opts)).collect()
}

/// ADE and chamfer distance of rendered views against the test scans. The
/// predicted cloud keeps pixels where the ground truth has a surface.
pub fn evaluate_views(cfg: &RunConfig, scene: &Scene, views: &[RenderedView], scans: &[DepthScan]) -> Result<MetricReport> {
    if views.len() != scans.len() {
        return Err(Error::ShapeMismatch(format!("{} rendered views for {} scans", views.len(), scans.len())));
    }
    let per_view = views
        .iter()
        .zip(scans)
        .map(|(v, s)| view_ade(v, s, &scene.bounding))
        .collect::<Result<Vec<_>>>()?;
    let ade_cm = crate::eval::mean_ade(&per_view)?;
    let mut predicted: Vec<Vec3> = Vec::new();
    for (view, scan) in views.iter().zip(scans) {
        let mask: Vec<bool> = scan.depth.iter().map(|d| *d > 0.0).collect();
        predicted.extend(surface_points(view, Some(&mask)));
    }
    let eval_seed = sub_seed(cfg.seed, seeds::EVAL);
    let n = cfg.eval.chamfer_points;
    if predicted.len() > n {
        predicted.shuffle(&mut ChaCha8Rng::seed_from_u64(eval_seed));
        predicted.truncate(n);
    }
    let reference = sample_surface(scene, n, sub_seed(eval_seed, 1));
    let cd = match chamfer(&predicted, &reference) {
        Ok(c) => Some(c),
        Err(Error::EmptySet) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        ade_cm: Some(ade_cm),
        cd_mean: cd.map(|c| c.mean * 1e3),
        cd_median: cd.map(|c| c.median * 1e3),
        accuracy: None,
        f1: None,
    })
}

/// Classifier accuracy and F1 on pairs drawn from the test views only.
pub fn evaluate_classifier(cfg: &RunConfig, data: &Dataset, classifier: &Classifier) -> Result<(f64, f64)> {
    let pairs = build_visibility_pairs(
        &data.pair_test,
        &data.scene.bounding,
        cfg.classifier.epsilon,
        cfg.eval.pair_budget,
        sub_seed(cfg.seed, seeds::EVAL),
    )?;
    classifier_metrics(classifier, &pairs.pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    NoClassifier,
    M(Vec<usize>),
    Noise(Vec<f64>),
    Sparsity(Vec<f64>),
    Loss,
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::NoClassifier => "no-classifier",
            Sweep::M(_) => "M",
            Sweep::Noise(_) => "noise",
            Sweep::Sparsity(_) => "sparsity",
            Sweep::Loss => "loss",
        }
    }
}

fn parse_list<T: FromStr>(text: &str) -> std::result::Result<Vec<T>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("bad sweep value {s:?}")))
        .collect()
}

impl FromStr for Sweep {
    type Err = String;

    /// `no-classifier`, `loss`, or `M`, `noise`, `sparsity` with optional
    /// `=v1,v2,...` values.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, values) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (s.trim(), None),
        };
        let sweep = match (name, values) {
            ("no-classifier", None) => Sweep::NoClassifier,
            ("loss", None) => Sweep::Loss,
            ("M", None) => Sweep::M(vec![10, 20, 40]),
            ("M", Some(v)) => Sweep::M(parse_list(v)?),
            ("noise", None) => Sweep::Noise(vec![0.0, 0.1, 0.5, 1.0]),
            ("noise", Some(v)) => Sweep::Noise(parse_list(v)?),
            ("sparsity", None) => Sweep::Sparsity(vec![0.05, 0.25, 1.0]),
            ("sparsity", Some(v)) => Sweep::Sparsity(parse_list(v)?),
            _ => return Err(format!("unknown sweep {s:?}")),
        };
        Ok(sweep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricReport,
    pub seconds: f64,
}

/// Trains one distance field per sweep value, holding everything else fixed,
/// and evaluates each on the test views.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, classifier: Option<&Classifier>, sweep: &Sweep) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, RunConfig)> = match sweep {
        Sweep::NoClassifier => {
            let with_m = if cfg.distance.m > 0 { cfg.distance.m } else { 20 };
            let mut with = cfg.clone();
            with.distance.m = with_m;
            let mut without = cfg.clone();
            without.distance.m = 0;
            vec![(format!("classifier (M={with_m})"), with), ("no classifier".into(), without)]
        }
        Sweep::M(ms) => ms
            .iter()
            .map(|&m| {
                let mut c = cfg.clone();
                c.distance.m = m;
                (format!("M={m}"), c)
            })
            .collect(),
        Sweep::Noise(vs) => vs
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.distance.noise_variance = v;
                (format!("noise={v}"), c)
            })
            .collect(),
        Sweep::Sparsity(ss) => ss
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.data.sparsity = s;
                (format!("sparsity={s}"), c)
            })
            .collect(),
        Sweep::Loss => [LossNorm::L1, LossNorm::L2]
            .into_iter()
            .map(|l| {
                let mut c = cfg.clone();
                c.distance.loss = l;
                (format!("loss={l:?}").to_lowercase(), c)
            })
            .collect(),
    };
    let mut rows = Vec::with_capacity(variants.len());
    for (label, variant) in variants {
        variant.validate()?;
        let started = Instant::now();
        let store = if variant.data.sparsity == cfg.data.sparsity {
            data.store.clone()
        } else {
            convert_scans(&data.train, &data.scene.bounding, variant.data.sparsity, sub_seed(cfg.seed, seeds::DATA))?
        };
        if variant.distance.m > 0 && classifier.is_none() {
            return Err(Error::MissingClassifier);
        }
        let (field, _) = train_distance_stage(&variant, &store, classifier, None, None)?;
        let seconds = started.elapsed().as_secs_f64();
        let views = render_scans(&variant, &field, &data.test, &data.scene.bounding)?;
        let report = evaluate_views(&variant, &data.scene, &views, &data.test)?;
        rows.push(AblationRow { label, report, seconds });
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.3}"))
}

pub fn format_ablation(sweep: &Sweep, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<24} {:>10} {:>12} {:>14} {:>10}", sweep.name(), "ADE(cm)", "CD mean e3", "CD median e3", "train(s)").expect("string write");
    for r in rows {
        writeln!(
            out,
            "{:<24} {:>10} {:>12} {:>14} {:>10.1}",
            r.label,
            cell(r.report.ade_cm),
            cell(r.report.cd_mean),
            cell(r.report.cd_median),
            r.seconds
        )
        .expect("string write");
    }
    out
}

/// Exclusive hold on an output directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            if rel != Path::new(MANIFEST) && rel != Path::new(LOCK) {
                out.push(rel.to_path_buf());
            }
        }
    }
    Ok(())
}

/// Rewrites `manifest.sha256` with one `<hex>  <relative path>` line per
/// file under `dir`, sorted by path.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rel = rel.to_string_lossy().replace('\\', "/");
        writeln!(text, "{}  {rel}", hex::encode(Sha256::digest(&bytes))).expect("string write");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))
}

/// Runs `body` holding the output-directory lock, then writes the effective
/// config and refreshes the manifest.
fn with_run<T>(cfg: &RunConfig, body: impl FnOnce() -> Result<T>) -> Result<T> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.out)?;
    write_text(&cfg.out.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    let result = body()?;
    write_manifest(&cfg.out)?;
    Ok(result)
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("checkpoints")
}

pub fn classifier_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("classifier.rayw")
}

pub fn distance_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("distance.rayw")
}

pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    with_run(cfg, || {
        let data = build_dataset(cfg)?;
        write_dataset(cfg, &data)?;
        let valid: usize = data.train.iter().map(DepthScan::valid_count).sum();
        emit(
            out,
            &format!(
                "generated {} train and {} test scans ({}x{}), {} hit pixels, {} stored samples\n",
                data.train.len(),
                data.test.len(),
                cfg.render.width,
                cfg.render.height,
                valid,
                data.store.len()
            ),
        )
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Classifier,
    Distance,
    Both,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classifier" => Ok(Stage::Classifier),
            "distance" => Ok(Stage::Distance),
            "both" => Ok(Stage::Both),
            _ => Err(format!("unknown stage {s:?} (classifier, distance, both)")),
        }
    }
}

/// Trains the requested stage(s) on the generated data. For the distance
/// stage alone, `classifier` overrides the default classifier checkpoint.
pub fn cmd_train(cfg: &RunConfig, stage: Stage, classifier: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    with_run(cfg, || {
        let data = load_dataset(cfg)?;
        let ckpt = checkpoint_dir(cfg);
        let mut trained = None;
        if matches!(stage, Stage::Classifier | Stage::Both) {
            let (model, report) = train_classifier_stage(cfg, &data, Some(&ckpt))?;
            model.save(&classifier_checkpoint(cfg), None)?;
            let mut log = String::new();
            for (e, l) in report.loss_curve.iter().enumerate() {
                writeln!(log, "{} {l:.6e}", e + 1).expect("string write");
            }
            write_text(&cfg.out.join("logs/classifier.log"), &log)?;
            emit(
                out,
                &format!(
                    "classifier: {} train / {} held-out pairs, accuracy {:.2}%, F1 {:.2}%\n",
                    report.train_pairs, report.heldout_pairs, report.accuracy, report.f1
                ),
            )?;
            trained = Some(model);
        }
        if matches!(stage, Stage::Distance | Stage::Both) {
            let model = match (trained, cfg.distance.m) {
                (_, 0) => None,
                (Some(m), _) => Some(m),
                (None, _) => {
                    let path = classifier.map_or_else(|| classifier_checkpoint(cfg), Path::to_path_buf);
                    if !path.exists() {
                        return Err(Error::MissingClassifier);
                    }
                    Some(Classifier::load(&path)?)
                }
            };
            let log_path = cfg.out.join("logs/distance.log");
            write_text(&log_path, "")?;
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let (field, report) = train_distance_stage(cfg, &data.store, model.as_ref(), Some(&ckpt), Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            field.save(&distance_checkpoint(cfg), None)?;
            let views = render_scans(cfg, &field, &data.test, &data.scene.bounding)?;
            let report_eval = evaluate_views(cfg, &data.scene, &views, &data.test)?;
            emit(
                out,
                &format!(
                    "distance: {} steps, train ADE {:.3} cm, held-out ADE {:.3} cm\n",
                    report.steps,
                    report.train_ade_cm,
                    report_eval.ade_cm.unwrap_or(f64::NAN)
                ),
            )?;
        }
        Ok(())
    })
}

/// Renders the configured split at the output resolution and writes rasters,
/// depth previews and a point cloud under `render/`.
pub fn cmd_render(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<Vec<RenderedView>> {
    with_run(cfg, || {
        let path = checkpoint.map_or_else(|| distance_checkpoint(cfg), Path::to_path_buf);
        let field = DistanceField::load(&path)?;
        let scene = cfg.scene()?;
        let (w, h) = cfg.output_resolution();
        let traj = Trajectory::generate(&cfg.trajectory_spec(), scene.bounding.center, w, h, &scene.bounding)?;
        let limit = if cfg.render.max_views == 0 { usize::MAX } else { cfg.render.max_views };
        let opts = render_options(cfg);
        let dir = cfg.out.join("render");
        let mut views = Vec::new();
        for (i, cam) in traj.cameras(cfg.render.split).take(limit).enumerate() {
            let started = Instant::now();
            let view = render_view(&field, cam, &scene.bounding, &opts)?;
            let seconds = started.elapsed().as_secs_f64();
            write_rendered(&view, &dir.join(format!("view_{i:03}.rayi")))?;
            write_depth_preview(&view, &dir.join(format!("view_{i:03}.pgm")))?;
            emit(
                out,
                &format!(
                    "view {i}: {w}x{h}, {} rays in sphere, {} network evaluations, {} outliers, {seconds:.2} s\n",
                    view.valid_count(),
                    view.evaluations,
                    view.outlier.iter().filter(|o| **o).count()
                ),
            )?;
            views.push(view);
        }
        match export_pointcloud(&views, &dir.join("cloud.ply")) {
            Ok(n) => emit(out, &format!("point cloud: {n} points\n"))?,
            Err(Error::EmptySet) => emit(out, "point cloud: no valid points\n")?,
            Err(e) => return Err(e),
        }
        Ok(views)
    })
}

/// Evaluates a checkpoint, or previously rendered rasters (`view_NNN.rayi`
/// matching the test scans), against the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, rasters: Option<&Path>, out: &mut dyn Write) -> Result<MetricReport> {
    with_run(cfg, || {
        let data = load_dataset(cfg)?;
        let views = match rasters {
            Some(dir) => (0..data.test.len())
                .map(|i| read_rendered(&dir.join(format!("view_{i:03}.rayi"))))
                .collect::<Result<Vec<_>>>()?,
            None => {
                let path = checkpoint.map_or_else(|| distance_checkpoint(cfg), Path::to_path_buf);
                let field = DistanceField::load(&path)?;
                render_scans(cfg, &field, &data.test, &data.scene.bounding)?
            }
        };
        let mut report = evaluate_views(cfg, &data.scene, &views, &data.test)?;
        let cls = classifier_checkpoint(cfg);
        if cls.exists() {
            let (acc, f1) = evaluate_classifier(cfg, &data, &Classifier::load(&cls)?)?;
            report.accuracy = Some(acc);
            report.f1 = Some(f1);
        }
        let text = report.to_key_values();
        write_text(&cfg.out.join(METRICS), &text)?;
        emit(out, &text)?;
        Ok(report)
    })
}

/// Runs a sweep and writes `ablation_<name>.txt`.
pub fn cmd_ablate(cfg: &RunConfig, sweep: &Sweep, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    with_run(cfg, || {
        let data = load_dataset(cfg)?;
        let needs_classifier = match sweep {
            Sweep::NoClassifier => true,
            Sweep::M(ms) => ms.iter().any(|m| *m > 0),
            _ => cfg.distance.m > 0,
        };
        let classifier = if needs_classifier {
            let path = classifier_checkpoint(cfg);
            Some(if path.exists() {
                Classifier::load(&path)?
            } else {
                let (model, _) = train_classifier_stage(cfg, &data, None)?;
                model.save(&path, None)?;
                model
            })
        } else {
            None
        };
        let rows = run_ablation(cfg, &data, classifier.as_ref(), sweep)?;
        let table = format_ablation(sweep, &rows);
        write_text(&cfg.out.join(format!("ablation_{}.txt", sweep.name())), &table)?;
        emit(out, &table)?;
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        assert_eq!("M".parse::<Sweep>().unwrap(), Sweep::M(vec![10, 20, 40]));
        assert_eq!("noise=0,0.5".parse::<Sweep>().unwrap(), Sweep::Noise(vec![0.0, 0.5]));
        assert_eq!("no-classifier".parse::<Sweep>().unwrap(), Sweep::NoClassifier);
        assert!("bogus".parse::<Sweep>().is_err());
        assert!("M=a".parse::<Sweep>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::TruncatedFile), 2);
        assert_eq!(exit_code(&Error::NonFiniteLoss { batch: 0 }), 3);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let held = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(held);
        RunLock::acquire(dir.path()).unwrap();
    }
}
