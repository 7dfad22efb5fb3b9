//! Dense SIREN stacks with hand-written reverse mode, Adam, learning-rate
//! schedules and losses.
//!
//! Batches are row-major `(rows, features)` matrices. Weights are stored
//! `(out, in)`. Sine layers compute `sin(ω (W x + b))`.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_file, ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAYW";
const CHECKPOINT_VERSION: u32 = 1;

/// Default SIREN frequency.
pub const OMEGA0: f32 = 30.0;

pub trait Scalar:
    Float + ndarray::LinalgScalar + ndarray::ScalarOperand + std::ops::AddAssign + std::ops::MulAssign + Send + Sync + Debug + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sine { omega: f32 },
    Linear,
    Sigmoid,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Sine { .. } => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn omega(self) -> f32 {
        match self {
            Activation::Sine { omega } => omega,
            _ => 0.0,
        }
    }

    fn from_tag(tag: u8, omega: f32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Linear),
            1 if omega > 0.0 => Ok(Activation::Sine { omega }),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::OutOfRange {
                what: "activation tag",
                value: tag as f64,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

/// Cached quantities from a training forward pass through one layer.
#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    input: Array2<T>,
    /// Derivative of the activation with respect to the pre-activation.
    slope: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LayerGrad<T> {
    pub fn zeros_like(layer: &Dense<T>) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} inputs, batch has {}",
                self.inputs(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn affine(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut z = self.affine(&x);
        match self.activation {
            Activation::Linear => {}
            Activation::Sine { omega } => {
                let w = T::of(omega as f64);
                z.mapv_inplace(|v| (w * v).sin());
            }
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
        Ok(z)
    }

    pub fn forward_train(&self, x: ArrayView2<T>) -> Result<(Array2<T>, LayerTape<T>)> {
        self.check_input(&x)?;
        let mut z = self.affine(&x);
        let mut slope = Array2::zeros(z.raw_dim());
        match self.activation {
            Activation::Linear => slope.fill(T::one()),
            Activation::Sine { omega } => {
                let w = T::of(omega as f64);
                Zip::from(&mut z).and(&mut slope).for_each(|z, s| {
                    let (sin, cos) = (w * *z).sin_cos();
                    *z = sin;
                    *s = w * cos;
                });
            }
            Activation::Sigmoid => Zip::from(&mut z).and(&mut slope).for_each(|z, s| {
                let y = sigmoid(*z);
                *z = y;
                *s = y * (T::one() - y);
            }),
        }
        Ok((
            z,
            LayerTape {
                input: x.to_owned(),
                slope,
            },
        ))
    }

    /// Returns parameter gradients and, when `want_input` is set, the gradient
    /// with respect to the layer input.
    pub fn backward(&self, tape: &LayerTape<T>, upstream: ArrayView2<T>, want_input: bool) -> Result<(LayerGrad<T>, Option<Array2<T>>)> {
        if upstream.dim() != tape.slope.dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} vs layer output {:?}",
                upstream.dim(),
                tape.slope.dim()
            )));
        }
        let dz = &upstream * &tape.slope;
        let weight = dz.t().dot(&tape.input);
        let bias = column_sums(&dz);
        let input = want_input.then(|| dz.dot(&self.weight));
        Ok((LayerGrad { weight, bias }, input))
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Column sums accumulated in f64.
fn column_sums<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    let mut acc = vec![0.0f64; m.ncols()];
    for row in m.rows() {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::of).collect()
}

/// A sequential stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Clone, Debug)]
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::ShapeMismatch(format!(
                    "layer with {} outputs feeds layer with {} inputs",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        for l in &layers {
            if let Activation::Sine { omega } = l.activation {
                if !(omega > 0.0) {
                    return Err(Error::OutOfRange {
                        what: "sine frequency",
                        value: omega as f64,
                    });
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.inputs()];
        s.extend(self.layers.iter().map(Dense::outputs));
        s
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let mut h = x.to_owned();
        for l in &self.layers {
            h = l.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Tape<T>)> {
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let (out, tape) = l.forward_train(h.view())?;
            tapes.push(tape);
            h = out;
        }
        Ok((h, Tape { layers: tapes }))
    }

    pub fn backward(&self, tape: &Tape<T>, upstream: ArrayView2<T>, want_input: bool) -> Result<(Vec<LayerGrad<T>>, Option<Array2<T>>)> {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut g = upstream.to_owned();
        let mut input_grad = None;
        for (i, (l, t)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let need = i > 0 || want_input;
            let (lg, dx) = l.backward(t, g.view(), need)?;
            grads.push(lg);
            match dx {
                Some(dx) if i > 0 => g = dx,
                dx => input_grad = dx,
            }
        }
        grads.reverse();
        Ok((grads, input_grad))
    }

    /// Gradient with respect to the network input only.
    pub fn input_gradient(&self, tape: &Tape<T>, upstream: ArrayView2<T>) -> Result<Array2<T>> {
        let mut g = upstream.to_owned();
        for (l, t) in self.layers.iter().zip(&tape.layers).rev() {
            if g.dim() != t.slope.dim() {
                return Err(Error::ShapeMismatch("upstream gradient shape differs from layer output".into()));
            }
            g *= &t.slope;
            g = g.dot(&l.weight);
        }
        Ok(g)
    }

    /// SIREN stack: sine hidden layers with frequency `omega`, final layer with
    /// `output` activation. The first layer draws weights from `±1/fan_in`,
    /// later layers from `±√(6/fan_in)/ω`; biases from `±1/√fan_in`.
    pub fn siren(sizes: &[usize], omega: f32, output: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::siren_with(&mut rng, sizes, omega, output, true)
    }

    /// Like [`Mlp::siren`] for any scalar type.
    pub fn siren_with_seed(sizes: &[usize], omega: f32, output: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::siren_with(&mut rng, sizes, omega, output, true).expect("at least two sizes")
    }

    pub(crate) fn siren_with<R: Rng>(rng: &mut R, sizes: &[usize], omega: f32, output: Activation, first: bool) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::ShapeMismatch("a network needs at least two layer sizes".into()));
        }
        let count = sizes.len() - 1;
        let layers = (0..count)
            .map(|i| {
                let act = if i + 1 == count {
                    output
                } else {
                    Activation::Sine { omega }
                };
                siren_layer(rng, sizes[i], sizes[i + 1], omega, act, first && i == 0)
            })
            .collect();
        Self::new(layers)
    }
}

pub(crate) fn siren_layer<T: Scalar, R: Rng>(
    rng: &mut R,
    inputs: usize,
    outputs: usize,
    omega: f32,
    activation: Activation,
    first: bool,
) -> Dense<T> {
    let fan = inputs as f64;
    let w_bound = if first { 1.0 / fan } else { (6.0 / fan).sqrt() / omega as f64 };
    let b_bound = 1.0 / fan.sqrt();
    let weight = Array2::from_shape_fn((outputs, inputs), |_| T::of(rng.random_range(-w_bound..w_bound)));
    let bias = Array1::from_shape_fn(outputs, |_| T::of(rng.random_range(-b_bound..b_bound)));
    Dense {
        weight,
        bias,
        activation,
    }
}

/// Distance-style SIREN: sine hidden layers and a linear head.
pub fn init_siren(sizes: &[usize], omega0: f32, seed: u64) -> Result<Mlp<f32>> {
    Mlp::siren(sizes, omega0, Activation::Linear, seed)
}

/// Anything exposing an ordered list of dense layers.
pub trait Layered<T> {
    fn layers(&self) -> Vec<&Dense<T>>;
    fn layers_mut(&mut self) -> Vec<&mut Dense<T>>;
}

impl<T> Layered<T> for Mlp<T> {
    fn layers(&self) -> Vec<&Dense<T>> {
        self.layers.iter().collect()
    }
    fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        self.layers.iter_mut().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub first: Vec<LayerGrad<T>>,
    pub second: Vec<LayerGrad<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<M: Layered<T>>(model: &M) -> Self {
        let zeros: Vec<LayerGrad<T>> = model.layers().into_iter().map(LayerGrad::zeros_like).collect();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter is touched.
pub fn adam_step<T: Scalar, M: Layered<T>>(model: &mut M, grads: &[LayerGrad<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    let mut layers = model.layers_mut();
    if layers.len() != grads.len() || grads.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers, {} gradients, {} moment buffers",
            layers.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (l, g) in layers.iter().zip(grads) {
        if l.weight.dim() != g.weight.dim() || l.bias.dim() != g.bias.dim() {
            return Err(Error::ShapeMismatch("gradient shape differs from parameters".into()));
        }
    }
    if !grads.iter().all(LayerGrad::is_finite) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(state.eps as f64));
    let step_size = T::of(lr / c1);
    let c2_sqrt = T::of(c2.sqrt());
    let one = T::one();
    let update = |p: &mut T, g: &T, m: &mut T, v: &mut T| {
        *m = b1 * *m + (one - b1) * *g;
        *v = b2 * *v + (one - b2) * *g * *g;
        *p = *p - step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
    };
    for (((l, g), m), v) in layers.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        Zip::from(&mut l.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(update);
        Zip::from(&mut l.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Cosine { lr_init: f64, lr_final: f64, total_steps: u64 },
    /// Triangular one-cycle from `lr_max / div` up to `lr_max` at the midpoint
    /// and back.
    Cyclic { lr_max: f64, div: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn total_steps(&self) -> u64 {
        match *self {
            LrSchedule::Cosine { total_steps, .. } | LrSchedule::Cyclic { total_steps, .. } => total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(Error::OutOfRange {
                what: "schedule step",
                value: step as f64,
            });
        }
        let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        Ok(match *self {
            LrSchedule::Cosine { lr_init, lr_final, .. } => {
                lr_final + (lr_init - lr_final) * (1.0 + (PI * frac).cos()) / 2.0
            }
            LrSchedule::Cyclic { lr_max, div, .. } => {
                let lr_min = lr_max / div;
                let tri = 1.0 - (2.0 * frac - 1.0).abs();
                lr_min + (lr_max - lr_min) * tri
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<Loss> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| sign(p - t) / n).collect();
    Ok(Loss { value, grad })
}

pub fn l2_loss(pred: &[f64], target: &[f64]) -> Result<Loss> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok(Loss { value, grad })
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<Loss> {
    bce_loss_weighted(pred, target, 1.0)
}

/// Binary cross-entropy with the positive-class terms scaled by `pos_weight`.
pub fn bce_loss_weighted(pred: &[f64], target: &[f64], pos_weight: f64) -> Result<Loss> {
    check_lengths(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::DomainError(p));
        }
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        value -= pos_weight * t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad.push((-pos_weight * t / q + (1.0 - t) / (1.0 - q)) / n);
    }
    Ok(Loss { value: value / n, grad })
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Serializes layers (and optionally optimizer state) in the `RAYW` format.
pub fn encode_checkpoint(layers: &[&Dense<f32>], adam: Option<&AdamState<f32>>) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(layers.len() as u32);
    for l in layers {
        w.u32(l.inputs() as u32);
        w.u32(l.outputs() as u32);
        w.u8(l.activation.tag());
        w.f32(l.activation.omega());
    }
    let put = |w: &mut ByteWriter, g: &Array2<f32>, b: &Array1<f32>| {
        w.f32s(g.as_standard_layout().as_slice().expect("standard layout"));
        w.f32s(b.as_slice().expect("contiguous bias"));
    };
    for l in layers {
        put(&mut w, &l.weight, &l.bias);
    }
    match adam {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            w.f32(s.beta1);
            w.f32(s.beta2);
            w.f32(s.eps);
            for m in s.first.iter().chain(&s.second) {
                put(&mut w, &m.weight, &m.bias);
            }
        }
    }
    w.buf
}

pub fn decode_checkpoint(data: &[u8]) -> Result<(Vec<Dense<f32>>, Option<AdamState<f32>>)> {
    let mut r = ByteReader::new(data);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(&[CHECKPOINT_VERSION])?;
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let tag = r.u8()?;
        let omega = r.f32()?;
        shapes.push((inputs, outputs, Activation::from_tag(tag, omega)?));
    }
    let get = |r: &mut ByteReader, inputs: usize, outputs: usize| -> Result<LayerGrad<f32>> {
        let w = r.f32s(inputs * outputs)?;
        let b = r.f32s(outputs)?;
        Ok(LayerGrad {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("sized read"),
            bias: Array1::from(b),
        })
    };
    let mut layers = Vec::with_capacity(count);
    for &(i, o, act) in &shapes {
        let g = get(&mut r, i, o)?;
        layers.push(Dense {
            weight: g.weight,
            bias: g.bias,
            activation: act,
        });
    }
    let adam = match r.u8()? {
        0 => None,
        _ => {
            let step = r.u64()?;
            let beta1 = r.f32()?;
            let beta2 = r.f32()?;
            let eps = r.f32()?;
            let mut first = Vec::with_capacity(count);
            for &(i, o, _) in &shapes {
                first.push(get(&mut r, i, o)?);
            }
            let mut second = Vec::with_capacity(count);
            for &(i, o, _) in &shapes {
                second.push(get(&mut r, i, o)?);
            }
            Some(AdamState {
                step,
                beta1,
                beta2,
                eps,
                first,
                second,
            })
        }
    };
    if !r.is_empty() {
        return Err(Error::ShapeMismatch("trailing bytes after checkpoint".into()));
    }
    Ok((layers, adam))
}

pub fn write_checkpoint(path: &Path, layers: &[&Dense<f32>], adam: Option<&AdamState<f32>>) -> Result<()> {
    ByteWriter {
        buf: encode_checkpoint(layers, adam),
    }
    .save(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<Dense<f32>>, Option<AdamState<f32>>)> {
    decode_checkpoint(&read_file(path)?)
}

/// Converts a network between scalar types.
pub fn cast_layers<A: Scalar, B: Scalar>(layers: &[Dense<A>]) -> Vec<Dense<B>> {
    layers
        .iter()
        .map(|l| Dense {
            weight: l.weight.mapv(|v| B::of(v.f64())),
            bias: l.bias.mapv(|v| B::of(v.f64())),
            activation: l.activation,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn zero_sine_layer_outputs_zero() {
        let l: Dense<f32> = Dense::zeros(3, 4, Activation::Sine { omega: 30.0 });
        let out = l.forward(array![[0.3f32, -2.0, 5.0], [1.0, 1.0, 1.0]].view()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_is_matmul() {
        let l = Dense {
            weight: array![[1.0f64, 2.0], [3.0, 4.0]],
            bias: array![0.5, -1.0],
            activation: Activation::Linear,
        };
        let out = l.forward(array![[1.0, -1.0]].view()).unwrap();
        assert_eq!(out, array![[1.0 - 2.0 + 0.5, 3.0 - 4.0 - 1.0]]);
        let (_, tape) = l.forward_train(array![[1.0, -1.0]].view()).unwrap();
        let (_, dx) = l.backward(&tape, array![[1.0, 2.0]].view(), true).unwrap();
        assert_eq!(dx.unwrap(), array![[1.0 + 6.0, 2.0 + 8.0]]);
    }

    #[test]
    fn shape_mismatch() {
        let net = init_siren(&[4, 8, 1], OMEGA0, 0).unwrap();
        assert!(matches!(net.forward(Array2::zeros((2, 3)).view()), Err(Error::ShapeMismatch(_))));
        assert!(Mlp::new(vec![Dense::<f32>::zeros(4, 8, Activation::Linear), Dense::zeros(7, 1, Activation::Linear)]).is_err());
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let net = init_siren(&[4, 32, 32, 1], OMEGA0, 1).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(_, c)| 0.1 * c as f32 - 0.2);
        let y = net.forward(x.view()).unwrap();
        assert!(y.iter().all(|v| *v == y[[0, 0]]));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let net = init_siren(&[4, 16, 1], OMEGA0, 2).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r as f32 - c as f32) * 0.1);
        let (y, tape) = net.forward_train(x.view()).unwrap();
        let (g, dx) = net.backward(&tape, Array2::zeros(y.raw_dim()).view(), true).unwrap();
        assert!(g.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == 0.0)));
        assert!(dx.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn siren_init_bounds_and_determinism() {
        let sizes = [4, 64, 64, 1];
        let a = init_siren(&sizes, OMEGA0, 9).unwrap();
        assert_eq!(a, init_siren(&sizes, OMEGA0, 9).unwrap());
        assert_ne!(a, init_siren(&sizes, OMEGA0, 10).unwrap());
        for (i, l) in a.layers.iter().enumerate() {
            let fan = l.inputs() as f32;
            let bound = if i == 0 { 1.0 / fan } else { (6.0 / fan).sqrt() / OMEGA0 };
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut net = Mlp::new(vec![Dense {
            weight: array![[1.0f32, -1.0]],
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let mut state = AdamState::new(&net);
        let grads = vec![LayerGrad {
            weight: array![[0.5f32, -3.0]],
            bias: array![0.0],
        }];
        adam_step(&mut net, &grads, &mut state, 1e-2).unwrap();
        assert_relative_eq!(net.layers[0].weight[[0, 0]], 1.0 - 1e-2, epsilon = 1e-6);
        assert_relative_eq!(net.layers[0].weight[[0, 1]], -1.0 + 1e-2, epsilon = 1e-6);
        assert_eq!(net.layers[0].bias[0], 0.0);
        let before = net.clone();
        let zero = vec![LayerGrad::zeros_like(&net.layers[0])];
        let mut fresh = AdamState::new(&net);
        adam_step(&mut net, &zero, &mut fresh, 1e-2).unwrap();
        assert_eq!(net, before);
        assert_eq!(fresh.step, 1);

        let bad = vec![LayerGrad {
            weight: array![[f32::NAN, 0.0]],
            bias: array![0.0],
        }];
        assert!(matches!(adam_step(&mut net, &bad, &mut fresh, 1e-2), Err(Error::NonFiniteGradient)));
        assert_eq!(net, before);
    }

    #[test]
    fn schedules() {
        let cos = LrSchedule::Cosine {
            lr_init: 1e-5,
            lr_final: 1e-8,
            total_steps: 100,
        };
        assert_eq!(cos.lr_at(0).unwrap(), 1e-5);
        assert_relative_eq!(cos.lr_at(100).unwrap(), 1e-8, max_relative = 1e-12);
        assert_relative_eq!(cos.lr_at(50).unwrap(), (1e-5 + 1e-8) / 2.0, max_relative = 1e-12);
        assert!(cos.lr_at(101).is_err());
        let cyc = LrSchedule::Cyclic {
            lr_max: 1e-4,
            div: 25.0,
            total_steps: 100,
        };
        assert_relative_eq!(cyc.lr_at(0).unwrap(), 1e-4 / 25.0, max_relative = 1e-12);
        assert_relative_eq!(cyc.lr_at(100).unwrap(), 1e-4 / 25.0, max_relative = 1e-12);
        assert_relative_eq!(cyc.lr_at(50).unwrap(), 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(l1_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap().value, 0.0);
        assert_relative_eq!(bce_loss(&[0.5], &[1.0]).unwrap().value, 2.0_f64.ln(), epsilon = 1e-15);
        assert!(matches!(bce_loss(&[1.5], &[1.0]), Err(Error::DomainError(_))));
        assert!(bce_loss(&[1.0], &[1.0]).unwrap().value.is_finite());

        let pred = [0.2, -0.4, 1.3];
        let target = [0.1, 0.3, 1.0];
        let l = l2_loss(&pred, &target).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut p = pred;
            p[i] += h;
            let up = l2_loss(&p, &target).unwrap().value;
            p[i] -= 2.0 * h;
            let down = l2_loss(&p, &target).unwrap().value;
            assert!(((up - down) / (2.0 * h) - l.grad[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = init_siren(&[4, 8, 8, 1], OMEGA0, 4).unwrap();
        let state = AdamState::new(&net);
        let layers = net.layers();
        let bytes = encode_checkpoint(&layers, Some(&state));
        let (back, adam) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, net.layers);
        assert_eq!(adam.unwrap(), state);
        assert_eq!(encode_checkpoint(&back.iter().collect::<Vec<_>>(), Some(&state)), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::TruncatedFile)));
    }
}
