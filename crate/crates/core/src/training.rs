//! Stage 1 (visibility classifier) and Stage 2 (distance field under the
//! multi-view consistency loss).

use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize_ray, normalize_point, normalize_ray, sub_seed, NormalizedRay, SampleStore, VisibilityPair};
use crate::error::{Error, Result};
use crate::eval::classification_metrics;
use crate::geometry::{sample_multiview_rays_with, BoundingSphere, Vec3};
use crate::model::{Architecture, Classifier, DistanceField};
use crate::nn::{adam_step, bce_loss_weighted, sign, AdamState, LayerGrad, Layered, LrSchedule};
use crate::scene::Scene;

/// Named salts for sub-seeds.
mod salt {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const NOISE: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// Ratio between peak and boundary learning rate of the one-cycle schedule.
    pub lr_div: f64,
    pub pair_budget: usize,
    pub epsilon: f64,
    /// Set by the caller; run configs derive it from the global seed.
    #[serde(skip)]
    pub seed: u64,
    pub hidden: usize,
    pub trunk_layers: usize,
    pub omega: f32,
    /// Scale of the positive-class loss terms.
    pub pos_weight: f64,
    pub holdout_fraction: f64,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 2048,
            lr_max: 1e-4,
            lr_div: 25.0,
            pair_budget: 200_000,
            epsilon: crate::dataset::DEFAULT_EPSILON,
            seed: 0,
            hidden: 128,
            trunk_layers: 4,
            omega: crate::nn::OMEGA0,
            pos_weight: 1.0,
            holdout_fraction: 0.1,
            checkpoint_dir: None,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        positive("classifier.epochs", self.epochs)?;
        positive("classifier.batch_size", self.batch_size)?;
        positive("classifier.pair_budget", self.pair_budget)?;
        positive("classifier.hidden", self.hidden)?;
        positive("classifier.trunk_layers", self.trunk_layers)?;
        finite_positive("classifier.epsilon", self.epsilon)?;
        finite_positive("classifier.lr_max", self.lr_max)?;
        finite_positive("classifier.lr_div", self.lr_div)?;
        finite_positive("classifier.pos_weight", self.pos_weight)?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "classifier.holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            layers: self.trunk_layers,
            omega: self.omega,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Multi-view rays per primary sample; 0 disables the classifier.
    #[serde(rename = "M")]
    pub m: usize,
    pub loss: LossNorm,
    /// Variance of the Gaussian noise added to classifier scores.
    pub noise_variance: f64,
    /// Binarize scores at this threshold instead of using them as weights.
    pub score_threshold: Option<f64>,
    pub radiance: bool,
    pub radiance_weight: f64,
    #[serde(skip)]
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub omega: f32,
    /// Primary samples per forward/backward pass; gradients are accumulated
    /// over a batch.
    pub micro_batch: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8192,
            lr_init: 1e-5,
            lr_final: 1e-8,
            m: 20,
            loss: LossNorm::L1,
            noise_variance: 0.0,
            score_threshold: None,
            radiance: false,
            radiance_weight: 1.0,
            seed: 0,
            hidden: 256,
            layers: 5,
            omega: crate::nn::OMEGA0,
            micro_batch: 256,
            checkpoint_dir: None,
        }
    }
}

impl DistanceConfig {
    pub fn validate(&self) -> Result<()> {
        positive("distance.epochs", self.epochs)?;
        positive("distance.batch_size", self.batch_size)?;
        positive("distance.hidden", self.hidden)?;
        positive("distance.micro_batch", self.micro_batch)?;
        if self.layers < 2 {
            return Err(Error::Config("distance.layers must be at least 2".into()));
        }
        finite_positive("distance.lr_init", self.lr_init)?;
        if !(self.lr_final >= 0.0 && self.lr_final.is_finite()) {
            return Err(Error::Config("distance.lr_final must be non-negative".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!(
                "distance.noise_variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        if !(self.radiance_weight >= 0.0) {
            return Err(Error::Config("distance.radiance_weight must be non-negative".into()));
        }
        if let Some(t) = self.score_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("distance.score_threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            layers: self.layers,
            omega: self.omega,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn finite_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    /// Held-out accuracy, percent.
    pub accuracy: f64,
    /// Held-out positive-class F1, percent.
    pub f1: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

fn pair_rows(pairs: &[&VisibilityPair]) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let n = pairs.len();
    (
        Array2::from_shape_fn((n, 4), |(r, c)| pairs[r].ray1.0[c] as f32),
        Array2::from_shape_fn((n, 4), |(r, c)| pairs[r].ray2.0[c] as f32),
        Array2::from_shape_fn((n, 3), |(r, c)| pairs[r].point[c] as f32),
    )
}

/// Splits indices `0..n` into (train, held-out) with a seeded shuffle.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains the visibility classifier with binary cross-entropy, Adam and a
/// one-cycle schedule, and reports metrics on a held-out 10% of the pairs.
pub fn train_classifier(pairs: &[VisibilityPair], config: &ClassifierConfig) -> Result<(Classifier, ClassifierReport)> {
    config.validate()?;
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::SingleClassData);
    }
    let (mut train, held) = holdout_split(pairs.len(), config.holdout_fraction, sub_seed(config.seed, salt::SPLIT));
    let mut model = Classifier::new(config.architecture(), sub_seed(config.seed, salt::INIT))?;
    let mut adam = AdamState::new(&model);
    let batches = train.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::Cyclic {
        lr_max: config.lr_max,
        div: config.lr_div,
        total_steps: (config.epochs * batches) as u64,
    };
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(config.seed, salt::SHUFFLE), epoch as u64));
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in train.chunks(config.batch_size).enumerate() {
            let batch: Vec<&VisibilityPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (r1, r2, p) = pair_rows(&batch);
            let (scores, tape) = model.forward_train(r1.view(), r2.view(), p.view())?;
            let pred: Vec<f64> = scores.iter().map(|s| *s as f64).collect();
            let target: Vec<f64> = batch.iter().map(|p| p.label as f64).collect();
            let loss = bce_loss_weighted(&pred, &target, config.pos_weight)?;
            if !loss.value.is_finite() {
                return Err(Error::NonFiniteLoss { batch: b });
            }
            let upstream = Array2::from_shape_fn((batch.len(), 1), |(r, _)| loss.grad[r] as f32);
            let grads = model.backward(&tape, upstream.view())?;
            adam_step(&mut model, &grads, &mut adam, schedule.lr_at(step)?)?;
            step += 1;
            epoch_loss += loss.value * batch.len() as f64;
        }
        loss_curve.push(epoch_loss / train.len() as f64);
        if let Some(dir) = &config.checkpoint_dir {
            model.save(&dir.join(format!("classifier_epoch{:03}.rayw", epoch + 1)), Some(&adam))?;
        }
    }
    let held_pairs: Vec<VisibilityPair> = held.iter().map(|&i| pairs[i]).collect();
    let scores = crate::eval::classifier_scores(&model, &held_pairs)?;
    let labels: Vec<u8> = held_pairs.iter().map(|p| p.label).collect();
    let (accuracy, f1) = classification_metrics(&scores, &labels)?;
    Ok((
        model,
        ClassifierReport {
            accuracy,
            f1,
            loss_curve,
            train_pairs: train.len(),
            heldout_pairs: held.len(),
        },
    ))
}

/// Source of visibility scores for multi-view rays.
pub trait VisibilityScorer: Sync {
    /// Scores rows `(primary[i], other[i], point[i])`.
    fn score(&self, primary: &[NormalizedRay], other: &[NormalizedRay], points: &[[f64; 3]]) -> Result<Vec<f64>>;
}

impl VisibilityScorer for Classifier {
    fn score(&self, primary: &[NormalizedRay], other: &[NormalizedRay], points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let n = primary.len();
        let r1 = Array2::from_shape_fn((n, 4), |(r, c)| primary[r].0[c] as f32);
        let r2 = Array2::from_shape_fn((n, 4), |(r, c)| other[r].0[c] as f32);
        let p = Array2::from_shape_fn((n, 3), |(r, c)| points[r][c] as f32);
        Ok(self.forward(r1.view(), r2.view(), p.view())?.iter().map(|s| *s as f64).collect())
    }
}

/// Ground-truth visibility by ray casting against an analytic scene.
pub struct OracleScorer<'a> {
    pub scene: &'a Scene,
    pub epsilon: f64,
}

impl VisibilityScorer for OracleScorer<'_> {
    fn score(&self, primary: &[NormalizedRay], other: &[NormalizedRay], points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let sphere = &self.scene.bounding;
        let half = sphere.diameter / 2.0;
        primary
            .iter()
            .zip(other)
            .zip(points)
            .map(|((a, b), p)| {
                let p = sphere.center + half * Vec3::new(p[0], p[1], p[2]);
                let v = self.scene.oracle_visibility(&denormalize_ray(a)?, &p, &denormalize_ray(b)?, self.epsilon);
                Ok(v as f64)
            })
            .collect()
    }
}

/// A batch of primary samples, each with `m` multi-view companions stored
/// contiguously (`rays[i * m .. (i + 1) * m]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch {
    pub m: usize,
    pub primary: Vec<NormalizedRay>,
    /// Normalized primary distances.
    pub target: Vec<f64>,
    /// World-space hit points.
    pub point: Vec<Vec3>,
    pub color: Option<Vec<[f32; 3]>>,
    pub rays: Vec<NormalizedRay>,
    /// Normalized distance from each companion's entry point to the hit point.
    pub d_tilde: Vec<f64>,
    pub weight: Vec<f64>,
}

impl MultiViewBatch {
    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    /// Network input: each primary ray followed by its companions.
    fn inputs(&self, range: std::ops::Range<usize>) -> Array2<f32> {
        let stride = self.m + 1;
        let n = range.len();
        let mut x = Array2::zeros((n * stride, 4));
        for (k, i) in range.enumerate() {
            x.row_mut(k * stride).assign(&ndarray::arr1(&self.primary[i].to_f32()));
            for j in 0..self.m {
                x.row_mut(k * stride + 1 + j).assign(&ndarray::arr1(&self.rays[i * self.m + j].to_f32()));
            }
        }
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub noise_variance: f64,
    pub threshold: Option<f64>,
}

const SCORE_CHUNK: usize = 8192;

/// Samples `m` rays through each selected sample's hit point and scores them.
/// Each sample draws from its own stream derived from `seed` and its store
/// index, so the result does not depend on thread count or batch layout.
pub fn build_multiview_batch(
    store: &SampleStore,
    indices: &[usize],
    scorer: Option<&dyn VisibilityScorer>,
    m: usize,
    opts: ScoreOptions,
    seed: u64,
) -> Result<MultiViewBatch> {
    let sphere = &store.sphere;
    if m > 0 && scorer.is_none() {
        return Err(Error::MissingClassifier);
    }
    let samples: Vec<_> = indices.iter().map(|&i| &store.samples[i]).collect();
    let primary: Vec<NormalizedRay> = samples.iter().map(|s| NormalizedRay(s.ray.map(|v| v as f64))).collect();
    let target: Vec<f64> = samples.iter().map(|s| s.distance as f64).collect();
    let point: Vec<Vec3> = samples.iter().map(|s| s.point_vec()).collect();
    let color = if store.has_color() {
        Some(samples.iter().map(|s| s.color.unwrap_or([0.0; 3])).collect())
    } else {
        None
    };

    let per_sample: Vec<Vec<(NormalizedRay, f64)>> = indices
        .par_iter()
        .zip(&point)
        .map(|(&index, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, index as u64));
            let rays = sample_multiview_rays_with(&mut rng, p, m, sphere)?;
            rays.into_iter()
                .map(|r| Ok((normalize_ray(&r.ray)?, r.distance / sphere.diameter)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rays = Vec::with_capacity(indices.len() * m);
    let mut d_tilde = Vec::with_capacity(indices.len() * m);
    for list in per_sample {
        for (r, d) in list {
            rays.push(r);
            d_tilde.push(d.clamp(0.0, 1.0));
        }
    }

    let mut weight = Vec::with_capacity(rays.len());
    if let Some(scorer) = scorer.filter(|_| m > 0) {
        let primary_rows: Vec<NormalizedRay> = primary.iter().flat_map(|r| std::iter::repeat_n(*r, m)).collect();
        let point_rows: Vec<[f64; 3]> = point
            .iter()
            .flat_map(|p| std::iter::repeat_n(normalize_point(p, sphere), m))
            .collect();
        let chunks: Vec<Vec<f64>> = (0..rays.len())
            .step_by(SCORE_CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + SCORE_CHUNK).min(rays.len());
                scorer.score(&primary_rows[start..end], &rays[start..end], &point_rows[start..end])
            })
            .collect::<Result<Vec<_>>>()?;
        weight.extend(chunks.into_iter().flatten());
        if opts.noise_variance > 0.0 {
            let noise = Normal::new(0.0, opts.noise_variance.sqrt()).map_err(|_| Error::OutOfRange {
                what: "noise variance",
                value: opts.noise_variance,
            })?;
            for (&index, ws) in indices.iter().zip(weight.chunks_mut(m)) {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(seed, index as u64), salt::NOISE));
                for w in ws {
                    *w = (*w + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        if let Some(t) = opts.threshold {
            for w in &mut weight {
                *w = if *w >= t { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(MultiViewBatch {
        m,
        primary,
        target,
        point,
        color,
        rays,
        d_tilde,
        weight,
    })
}

/// Visibility-weighted consistency loss for one primary sample:
/// `(e(d̂ − d) + Σ v_m e(d̂_m − d̃_m)) / (Σ v_m + 1)` with `e` the absolute or
/// squared error. Returns the loss and its gradient with respect to
/// `[d̂, d̂_1, …, d̂_M]`.
pub fn multiview_loss(
    target: f64,
    d_tilde: &[f64],
    weights: &[f64],
    pred: &[f64],
    norm: LossNorm,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != d_tilde.len() + 1 || weights.len() != d_tilde.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} multi-view rays",
            pred.len(),
            d_tilde.len()
        )));
    }
    let (err, derr): (fn(f64) -> f64, fn(f64) -> f64) = match norm {
        LossNorm::L1 => (f64::abs, sign),
        LossNorm::L2 => (|x| x * x, |x| 2.0 * x),
    };
    let denom = 1.0 + weights.iter().sum::<f64>();
    let mut total = err(pred[0] - target);
    let mut grad = Vec::with_capacity(pred.len());
    grad.push(derr(pred[0] - target) / denom);
    for ((p, t), w) in pred[1..].iter().zip(d_tilde).zip(weights) {
        total += w * err(p - t);
        grad.push(w * derr(p - t) / denom);
    }
    Ok((total / denom, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean primary-ray error on the training set during the last epoch, cm.
    pub train_ade_cm: f64,
    pub steps: u64,
}

/// Trains the distance field. With `m > 0` every primary sample is
/// accompanied by `m` multi-view rays weighted by the frozen scorer.
/// One line per optimizer step is written to `log`: step, learning rate,
/// loss, running ADE (cm) over the current epoch.
pub fn train_distance(
    store: &SampleStore,
    scorer: Option<&dyn VisibilityScorer>,
    config: &DistanceConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(DistanceField, DistanceReport)> {
    config.validate()?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if config.m > 0 && scorer.is_none() {
        return Err(Error::MissingClassifier);
    }
    if config.radiance && !store.has_color() {
        return Err(Error::Config("distance.radiance needs a store with colors".into()));
    }
    let sphere: BoundingSphere = store.sphere;
    let mut field = DistanceField::new(config.architecture(), config.radiance, sub_seed(config.seed, salt::INIT))?;
    let mut adam = AdamState::new(&field);
    let batches = store.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::Cosine {
        lr_init: config.lr_init,
        lr_final: config.lr_final,
        total_steps: (config.epochs * batches) as u64,
    };
    let opts = ScoreOptions {
        noise_variance: config.noise_variance,
        threshold: config.score_threshold,
    };
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    let mut train_ade_cm = 0.0;
    for epoch in 0..config.epochs {
        let epoch_seed = sub_seed(config.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(epoch_seed, salt::SHUFFLE)));
        let sampling_seed = sub_seed(epoch_seed, salt::SAMPLING);
        let (mut epoch_loss, mut abs_err, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = build_multiview_batch(store, chunk, scorer, config.m, opts, sampling_seed)?;
            let (loss, err, grads) = batch_gradients(&field, &batch, config)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { batch: b });
            }
            let lr = schedule.lr_at(step)?;
            adam_step(&mut field, &grads, &mut adam, lr)?;
            step += 1;
            epoch_loss += loss * batch.len() as f64;
            abs_err += err;
            seen += batch.len();
            let running = 100.0 * sphere.diameter * abs_err / seen as f64;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{step} {lr:.6e} {loss:.6e} {running:.4}").map_err(|e| Error::io("training log", e))?;
            }
        }
        loss_curve.push(epoch_loss / store.len() as f64);
        train_ade_cm = 100.0 * sphere.diameter * abs_err / seen as f64;
        if let Some(dir) = &config.checkpoint_dir {
            field.save(&dir.join(format!("distance_epoch{:03}.rayw", epoch + 1)), Some(&adam))?;
        }
    }
    Ok((
        field,
        DistanceReport {
            loss_curve,
            train_ade_cm,
            steps: step,
        },
    ))
}

/// Mean batch loss, summed absolute primary error (normalized units) and the
/// accumulated parameter gradients.
fn batch_gradients(field: &DistanceField, batch: &MultiViewBatch, config: &DistanceConfig) -> Result<(f64, f64, Vec<LayerGrad<f32>>)> {
    let n = batch.len();
    let m = batch.m;
    let stride = m + 1;
    let mut total: Option<Vec<LayerGrad<f32>>> = None;
    let (mut loss_sum, mut abs_err) = (0.0, 0.0);
    for start in (0..n).step_by(config.micro_batch) {
        let end = (start + config.micro_batch).min(n);
        let x = batch.inputs(start..end);
        let (out, tape) = field.forward_train(x.view())?;
        let rows = x.nrows();
        let mut d_dist = Array2::<f32>::zeros((rows, 1));
        let mut d_color = out.color.as_ref().map(|_| Array2::<f32>::zeros((rows, 3)));
        for (k, i) in (start..end).enumerate() {
            let base = k * stride;
            let pred: Vec<f64> = (0..stride).map(|j| out.distance[[base + j, 0]] as f64).collect();
            let w = &batch.weight[i * m..(i + 1) * m];
            let weights: Vec<f64> = if w.len() == m { w.to_vec() } else { vec![0.0; m] };
            let (loss, grad) = multiview_loss(batch.target[i], &batch.d_tilde[i * m..(i + 1) * m], &weights, &pred, config.loss)?;
            loss_sum += loss;
            abs_err += (pred[0] - batch.target[i]).abs();
            for (j, g) in grad.iter().enumerate() {
                d_dist[[base + j, 0]] = (g / n as f64) as f32;
            }
            if let (Some(dc), Some(colors), Some(targets)) = (d_color.as_mut(), out.color.as_ref(), batch.color.as_ref()) {
                let denom = 1.0 + weights.iter().sum::<f64>();
                let target = targets[i];
                for j in 0..stride {
                    let wj = if j == 0 { 1.0 } else { weights[j - 1] };
                    let mut se = 0.0;
                    for c in 0..3 {
                        let diff = colors[[base + j, c]] as f64 - target[c] as f64;
                        se += diff * diff / 3.0;
                        dc[[base + j, c]] =
                            (config.radiance_weight * wj * 2.0 * diff / 3.0 / denom / n as f64) as f32;
                    }
                    loss_sum += config.radiance_weight * wj * se / denom;
                }
            }
        }
        let (grads, _) = field.backward(&tape, d_dist.view(), d_color.as_ref().map(|a| a.view()), false)?;
        match total.as_mut() {
            None => total = Some(grads),
            Some(t) => t.iter_mut().zip(&grads).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let grads = total.unwrap_or_else(|| field.layers().into_iter().map(LayerGrad::zeros_like).collect());
    Ok((loss_sum / n as f64, abs_err, grads))
}
