//! The two networks: the dual-ray visibility classifier and the ray-surface
//! distance field (with its optional radiance branch).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::NormalizedRay;
use crate::error::{Error, Result};
use crate::nn::{
    read_checkpoint, siren_layer, write_checkpoint, Activation, AdamState, Dense, LayerGrad, LayerTape, Layered, Mlp, Tape,
};

/// Network shape shared by both models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub hidden: usize,
    /// Dense layers in the trunk, including the output layer.
    pub layers: usize,
    pub omega: f32,
}

/// Dual-ray visibility classifier. Both rays pass through the shared encoder
/// `g`, the encodings are averaged, concatenated with the point encoding `k`
/// and fed through a sigmoid-headed trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub ray_encoder: Dense<f32>,
    pub point_encoder: Dense<f32>,
    pub trunk: Mlp<f32>,
}

pub struct ClassifierTape {
    g1: LayerTape<f32>,
    g2: LayerTape<f32>,
    k: LayerTape<f32>,
    trunk: Tape<f32>,
}

impl Classifier {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.layers < 1 || arch.hidden == 0 {
            return Err(Error::ShapeMismatch("classifier needs a nonempty trunk".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.hidden;
        let sine = Activation::Sine { omega: arch.omega };
        let ray_encoder = siren_layer(&mut rng, 4, h, arch.omega, sine, true);
        let point_encoder = siren_layer(&mut rng, 3, h, arch.omega, sine, true);
        let mut sizes = vec![2 * h];
        sizes.extend(std::iter::repeat_n(h, arch.layers - 1));
        sizes.push(1);
        let trunk = Mlp::siren_with(&mut rng, &sizes, arch.omega, Activation::Sigmoid, false)?;
        Ok(Self {
            ray_encoder,
            point_encoder,
            trunk,
        })
    }

    pub fn from_layers(mut layers: Vec<Dense<f32>>) -> Result<Self> {
        if layers.len() < 3 {
            return Err(Error::ShapeMismatch("classifier checkpoint has fewer than three layers".into()));
        }
        let trunk = Mlp::new(layers.split_off(2))?;
        let point_encoder = layers.pop().expect("two layers left");
        let ray_encoder = layers.pop().expect("one layer left");
        if ray_encoder.inputs() != 4 || point_encoder.inputs() != 3 {
            return Err(Error::ShapeMismatch("classifier encoders expect 4 and 3 inputs".into()));
        }
        let h = ray_encoder.outputs();
        if point_encoder.outputs() != h || trunk.inputs() != 2 * h || trunk.outputs() != 1 {
            return Err(Error::ShapeMismatch("classifier layer widths are inconsistent".into()));
        }
        Ok(Self {
            ray_encoder,
            point_encoder,
            trunk,
        })
    }

    fn check(ray1: &ArrayView2<f32>, ray2: &ArrayView2<f32>, point: &ArrayView2<f32>) -> Result<()> {
        let n = ray1.nrows();
        if ray2.nrows() != n || point.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "classifier batch rows {} / {} / {}",
                n,
                ray2.nrows(),
                point.nrows()
            )));
        }
        Ok(())
    }

    /// Scores `n` (ray1, ray2, point) triples; returns an `n × 1` matrix.
    pub fn forward(&self, ray1: ArrayView2<f32>, ray2: ArrayView2<f32>, point: ArrayView2<f32>) -> Result<Array2<f32>> {
        Self::check(&ray1, &ray2, &point)?;
        // each ray batch goes through its own call of identical shape, so the
        // two encodings are bitwise what they would be with the rays swapped
        let g1 = self.ray_encoder.forward(ray1)?;
        let g2 = self.ray_encoder.forward(ray2)?;
        let k = self.point_encoder.forward(point)?;
        let pooled = (g1 + g2) * 0.5;
        let joined = concatenate(Axis(1), &[pooled.view(), k.view()]).expect("equal rows");
        self.trunk.forward(joined.view())
    }

    pub fn forward_train(
        &self,
        ray1: ArrayView2<f32>,
        ray2: ArrayView2<f32>,
        point: ArrayView2<f32>,
    ) -> Result<(Array2<f32>, ClassifierTape)> {
        Self::check(&ray1, &ray2, &point)?;
        let (g1, t1) = self.ray_encoder.forward_train(ray1)?;
        let (g2, t2) = self.ray_encoder.forward_train(ray2)?;
        let (k, tk) = self.point_encoder.forward_train(point)?;
        let pooled = (g1 + g2) * 0.5;
        let joined = concatenate(Axis(1), &[pooled.view(), k.view()]).expect("equal rows");
        let (out, trunk) = self.trunk.forward_train(joined.view())?;
        Ok((
            out,
            ClassifierTape {
                g1: t1,
                g2: t2,
                k: tk,
                trunk,
            },
        ))
    }

    /// Parameter gradients in [`Layered`] order.
    pub fn backward(&self, tape: &ClassifierTape, upstream: ArrayView2<f32>) -> Result<Vec<LayerGrad<f32>>> {
        let (trunk_grads, joined) = self.trunk.backward(&tape.trunk, upstream, true)?;
        let joined = joined.expect("requested input gradient");
        let h = self.ray_encoder.outputs();
        let pooled = joined.slice(s![.., ..h]).mapv(|v| v * 0.5);
        let (mut g, _) = self.ray_encoder.backward(&tape.g1, pooled.view(), false)?;
        let (g2, _) = self.ray_encoder.backward(&tape.g2, pooled.view(), false)?;
        g.add_assign(&g2);
        let (k, _) = self.point_encoder.backward(&tape.k, joined.slice(s![.., h..]), false)?;
        let mut grads = vec![g, k];
        grads.extend(trunk_grads);
        Ok(grads)
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState<f32>>) -> Result<()> {
        write_checkpoint(path, &self.layers(), adam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_layers(read_checkpoint(path)?.0)
    }
}

impl Layered<f32> for Classifier {
    fn layers(&self) -> Vec<&Dense<f32>> {
        let mut out = vec![&self.ray_encoder, &self.point_encoder];
        out.extend(self.trunk.layers.iter());
        out
    }
    fn layers_mut(&mut self) -> Vec<&mut Dense<f32>> {
        let mut out = vec![&mut self.ray_encoder, &mut self.point_encoder];
        out.extend(self.trunk.layers.iter_mut());
        out
    }
}

/// Scores a single pair.
pub fn classifier_forward(params: &Classifier, ray1: &NormalizedRay, ray2: &NormalizedRay, point: &[f64; 3]) -> Result<f32> {
    let row = |a: &[f64]| Array2::from_shape_fn((1, a.len()), |(_, c)| a[c] as f32);
    let out = params.forward(row(&ray1.0).view(), row(&ray2.0).view(), row(point).view())?;
    Ok(out[[0, 0]])
}

/// Ray-surface distance field: a sine trunk with a linear distance head and an
/// optional two-layer radiance branch fed by the last trunk layer.
#[derive(Debug)]
pub struct DistanceField {
    pub trunk: Mlp<f32>,
    pub head: Dense<f32>,
    pub radiance: Option<Mlp<f32>>,
    evaluations: AtomicU64,
}

impl Clone for DistanceField {
    fn clone(&self) -> Self {
        Self {
            trunk: self.trunk.clone(),
            head: self.head.clone(),
            radiance: self.radiance.clone(),
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl PartialEq for DistanceField {
    fn eq(&self, other: &Self) -> bool {
        self.trunk == other.trunk && self.head == other.head && self.radiance == other.radiance
    }
}

pub struct FieldTape {
    trunk: Tape<f32>,
    head: LayerTape<f32>,
    radiance: Option<Tape<f32>>,
}

pub struct FieldOutput {
    /// `n × 1` normalized distances.
    pub distance: Array2<f32>,
    /// `n × 3` colors when the radiance branch exists.
    pub color: Option<Array2<f32>>,
}

impl DistanceField {
    pub fn new(arch: Architecture, radiance: bool, seed: u64) -> Result<Self> {
        if arch.layers < 2 || arch.hidden == 0 {
            return Err(Error::ShapeMismatch("distance field needs at least two layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.hidden;
        let mut sizes = vec![4];
        sizes.extend(std::iter::repeat_n(h, arch.layers - 1));
        let sine = Activation::Sine { omega: arch.omega };
        let trunk = Mlp::siren_with(&mut rng, &sizes, arch.omega, sine, true)?;
        let head = siren_layer(&mut rng, h, 1, arch.omega, Activation::Linear, false);
        let radiance = if radiance {
            Some(Mlp::siren_with(&mut rng, &[h, h, 3], arch.omega, Activation::Sigmoid, false)?)
        } else {
            None
        };
        Ok(Self {
            trunk,
            head,
            radiance,
            evaluations: AtomicU64::new(0),
        })
    }

    /// Rebuilds a field from a flat layer list: trunk layers up to the single
    /// output head, then any radiance layers.
    pub fn from_layers(mut layers: Vec<Dense<f32>>) -> Result<Self> {
        let head_at = layers
            .iter()
            .position(|l| l.outputs() == 1 && l.activation == Activation::Linear)
            .ok_or_else(|| Error::ShapeMismatch("no distance head in layer list".into()))?;
        let rest = layers.split_off(head_at + 1);
        let head = layers.pop().expect("head present");
        let trunk = Mlp::new(layers)?;
        if trunk.inputs() != 4 || trunk.outputs() != head.inputs() {
            return Err(Error::ShapeMismatch("distance trunk widths are inconsistent".into()));
        }
        let radiance = if rest.is_empty() {
            None
        } else {
            let r = Mlp::new(rest)?;
            if r.inputs() != head.inputs() || r.outputs() != 3 {
                return Err(Error::ShapeMismatch("radiance branch widths are inconsistent".into()));
            }
            Some(r)
        };
        Ok(Self {
            trunk,
            head,
            radiance,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState<f32>>) -> Result<()> {
        write_checkpoint(path, &self.layers(), adam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_layers(read_checkpoint(path)?.0)
    }

    /// Total number of rays passed through the network so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn count(&self, rows: usize) {
        self.evaluations.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub fn forward(&self, rays: ArrayView2<f32>) -> Result<FieldOutput> {
        let h = self.trunk.forward(rays)?;
        self.count(rays.nrows());
        let distance = self.head.forward(h.view())?;
        let color = match &self.radiance {
            Some(r) => Some(r.forward(h.view())?),
            None => None,
        };
        Ok(FieldOutput { distance, color })
    }

    pub fn forward_train(&self, rays: ArrayView2<f32>) -> Result<(FieldOutput, FieldTape)> {
        let (h, trunk) = self.trunk.forward_train(rays)?;
        self.count(rays.nrows());
        let (distance, head) = self.head.forward_train(h.view())?;
        let (color, radiance) = match &self.radiance {
            Some(r) => {
                let (c, t) = r.forward_train(h.view())?;
                (Some(c), Some(t))
            }
            None => (None, None),
        };
        Ok((FieldOutput { distance, color }, FieldTape { trunk, head, radiance }))
    }

    /// Parameter gradients in [`Layered`] order, plus the input gradient when
    /// requested.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_distance: ArrayView2<f32>,
        d_color: Option<ArrayView2<f32>>,
        want_input: bool,
    ) -> Result<(Vec<LayerGrad<f32>>, Option<Array2<f32>>)> {
        let (head_grad, dh) = self.head.backward(&tape.head, d_distance, true)?;
        let mut dh = dh.expect("requested input gradient");
        let mut radiance_grads = Vec::new();
        if let (Some(r), Some(t)) = (&self.radiance, &tape.radiance) {
            let rows = d_distance.nrows();
            let zeros;
            let dc = match d_color {
                Some(dc) => dc,
                None => {
                    zeros = Array2::zeros((rows, 3));
                    zeros.view()
                }
            };
            let (g, dx) = r.backward(t, dc, true)?;
            dh += &dx.expect("requested input gradient");
            radiance_grads = g;
        }
        let (mut grads, input) = self.trunk.backward(&tape.trunk, dh.view(), want_input)?;
        grads.push(head_grad);
        grads.extend(radiance_grads);
        Ok((grads, input))
    }

    /// Normalized distances, their gradients with respect to the four
    /// normalized ray inputs and (with a radiance branch) colors, from one
    /// evaluation per row.
    pub fn evaluate_with_gradient(&self, rays: ArrayView2<f32>) -> Result<(Vec<f32>, Array2<f32>, Option<Array2<f32>>)> {
        let (h, trunk) = self.trunk.forward_train(rays)?;
        self.count(rays.nrows());
        let d = self.head.forward(h.view())?;
        let color = match &self.radiance {
            Some(r) => Some(r.forward(h.view())?),
            None => None,
        };
        let ones = Array2::from_elem((rays.nrows(), 1), 1.0f32);
        let dh = ones.dot(&self.head.weight);
        let grad = self.trunk.input_gradient(&trunk, dh.view())?;
        Ok((d.iter().copied().collect(), grad, color))
    }
}

impl Layered<f32> for DistanceField {
    fn layers(&self) -> Vec<&Dense<f32>> {
        let mut out: Vec<&Dense<f32>> = self.trunk.layers.iter().collect();
        out.push(&self.head);
        if let Some(r) = &self.radiance {
            out.extend(r.layers.iter());
        }
        out
    }
    fn layers_mut(&mut self) -> Vec<&mut Dense<f32>> {
        let mut out: Vec<&mut Dense<f32>> = self.trunk.layers.iter_mut().collect();
        out.push(&mut self.head);
        if let Some(r) = &mut self.radiance {
            out.extend(r.layers.iter_mut());
        }
        out
    }
}
