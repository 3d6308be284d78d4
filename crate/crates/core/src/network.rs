//! Masked multilayer perceptron with hand-written forward and backward passes.
//!
//! Hidden layers use ReLU, the output layer softmax. The backward pass always
//! returns dense weight gradients, masked-out positions included, because
//! gradient-based regrowth ranks exactly those entries. The mask is enforced
//! by the optimizer instead.

use crate::error::{Error, Result};
use crate::sparsity::MaskSet;
use crate::tensor::{Matrix, Rng};
use crate::PROB_EPS;

/// Shape of one layer. `kernel_w`/`kernel_h` only matter for the density
/// allocation of convolutional layers; fully-connected layers keep them at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    pub kernel_w: usize,
    pub kernel_h: usize,
}

impl LayerShape {
    pub fn dense(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            kernel_w: 1,
            kernel_h: 1,
        }
    }

    pub fn conv(n_in: usize, n_out: usize, kernel_w: usize, kernel_h: usize) -> Self {
        Self {
            n_in,
            n_out,
            kernel_w,
            kernel_h,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kernel_w * self.kernel_h > 1
    }

    pub fn params(&self) -> usize {
        self.n_in * self.n_out * self.kernel_w * self.kernel_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || self.kernel_w == 0 || self.kernel_h == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer shape {self:?} has a zero dimension"
            )));
        }
        Ok(())
    }

    /// Chains widths `[d, h1, .., k]` into fully-connected layer shapes.
    pub fn mlp(widths: &[usize]) -> Vec<LayerShape> {
        widths.windows(2).map(|w| LayerShape::dense(w[0], w[1])).collect()
    }
}

/// Weights (`n_out × n_in`, row-major) and a dense bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn shape(&self) -> LayerShape {
        LayerShape::dense(self.weights.cols(), self.weights.rows())
    }
}

/// A fully-connected network whose weights are zero outside its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseNetwork {
    pub layers: Vec<Layer>,
    pub masks: MaskSet,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, `activations[l]` the ReLU output of
    /// hidden layer `l`.
    activations: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Matrix>,
    pub probabilities: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Dense gradients of the mean cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to the input batch, used by FGSM.
    pub input: Matrix,
}

impl SparseNetwork {
    /// He-initialised network (dense fan-in scaling), then masked. Biases start at zero.
    pub fn init(shapes: &[LayerShape], masks: MaskSet, rng: &mut Rng) -> Result<Self> {
        if shapes.len() != masks.layers.len() {
            return Err(Error::dims(
                "SparseNetwork::init",
                format!("{} shapes, {} masks", shapes.len(), masks.layers.len()),
            ));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (shape, mask) in shapes.iter().zip(&masks.layers) {
            shape.validate()?;
            if shape.is_conv() {
                return Err(Error::InvalidArgument(
                    "only fully-connected layers can be instantiated".into(),
                ));
            }
            if mask.rows != shape.n_out || mask.cols != shape.n_in {
                return Err(Error::dims(
                    "SparseNetwork::init",
                    format!(
                        "mask {}x{} for layer {}->{}",
                        mask.rows, mask.cols, shape.n_in, shape.n_out
                    ),
                ));
            }
            let std = (2.0 / shape.n_in as f64).sqrt();
            let data = mask
                .active
                .iter()
                .map(|&on| {
                    // draw for every position so the stream does not depend on the mask
                    let w = rng.normal() * std;
                    if on {
                        w
                    } else {
                        0.0
                    }
                })
                .collect();
            layers.push(Layer {
                weights: Matrix::from_vec(shape.n_out, shape.n_in, data)?,
                bias: vec![0.0; shape.n_out],
            });
        }
        Ok(Self { layers, masks })
    }

    /// Builds a network from explicit parameters, zeroing weights outside the mask.
    pub fn from_parts(layers: Vec<Layer>, masks: MaskSet) -> Result<Self> {
        if layers.len() != masks.layers.len() {
            return Err(Error::dims(
                "SparseNetwork::from_parts",
                format!("{} layers, {} masks", layers.len(), masks.layers.len()),
            ));
        }
        let mut net = Self { layers, masks };
        for (i, (layer, mask)) in net.layers.iter().zip(&net.masks.layers).enumerate() {
            if layer.weights.shape() != (mask.rows, mask.cols) || layer.bias.len() != mask.rows {
                return Err(Error::dims(
                    "SparseNetwork::from_parts",
                    format!("layer {i} does not match its mask"),
                ));
            }
        }
        net.apply_masks();
        Ok(net)
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(Layer::shape).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.cols())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    /// Forces every masked-out weight to exactly zero.
    pub fn apply_masks(&mut self) {
        for (layer, mask) in self.layers.iter_mut().zip(&self.masks.layers) {
            for (w, &on) in layer.weights.as_mut_slice().iter_mut().zip(&mask.active) {
                if !on {
                    *w = 0.0;
                }
            }
        }
    }

    /// Number of weights that are nonzero while their mask entry is off.
    pub fn mask_violations(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.masks.layers)
            .map(|(layer, mask)| {
                layer
                    .weights
                    .as_slice()
                    .iter()
                    .zip(&mask.active)
                    .filter(|(&w, &on)| !on && w != 0.0)
                    .count()
            })
            .sum()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dims(
                "forward",
                format!(
                    "batch has {} features, network expects {}",
                    batch.cols(),
                    self.input_dim()
                ),
            ));
        }
        if !batch.all_finite() {
            return Err(Error::NonFinite("forward input"));
        }
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut current = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul_transposed(&layer.weights)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            activations.push(current);
            if l + 1 < n_layers {
                current = z.map(|v| v.max(0.0));
                pre_activations.push(z);
            } else {
                current = softmax_rows(&z);
            }
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
            probabilities: current,
        })
    }

    /// Class probabilities only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.probabilities)
    }

    /// Gradients of the mean cross-entropy and the loss itself.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(Gradients, f64)> {
        let probs = &cache.probabilities;
        let (n, k) = probs.shape();
        if labels.len() != n {
            return Err(Error::dims("backward", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let inv_n = 1.0 / n.max(1) as f64;
        let mut loss = 0.0;
        let mut delta = probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            loss -= probs.get(r, y).clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
            let row = delta.row_mut(r);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
        loss *= inv_n;

        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let weights = &self.layers[l].weights;
            let grad_w = delta.transposed_matmul(&cache.activations[l])?;
            let grad_b = delta.column_sums();
            layer_grads.push(LayerGradient {
                weights: grad_w,
                bias: grad_b,
            });
            let mut upstream = delta.matmul(weights)?;
            if l > 0 {
                let z = &cache.pre_activations[l - 1];
                for (u, &zv) in upstream.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
                input: delta,
            },
            loss,
        ))
    }

    /// Forward plus backward on one batch.
    pub fn loss_and_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<(Gradients, f64)> {
        let cache = self.forward(batch)?;
        self.backward(&cache, labels)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let probs = self.predict(batch)?;
        let k = probs.cols();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            total -= probs.get(r, y).clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
        }
        Ok(total / labels.len().max(1) as f64)
    }
}

/// Max-subtracted softmax. Entries are floored at `PROB_EPS` and the row is
/// renormalised, so every probability is strictly inside (0, 1).
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let mut clamped_sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / sum).max(PROB_EPS);
            clamped_sum += *v;
        }
        for v in row.iter_mut() {
            *v /= clamped_sum;
        }
    }
    out
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(Matrix, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(net: &SparseNetwork, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0,1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay}")));
        }
        let velocity = net
            .layers
            .iter()
            .map(|l| {
                (
                    Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    vec![0.0; l.bias.len()],
                )
            })
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    /// Momentum buffer of a layer's weights.
    pub fn weight_velocity(&self, layer: usize) -> &Matrix {
        &self.velocity[layer].0
    }

    /// Zeroes the momentum of the given flat weight positions.
    pub fn reset_velocity(&mut self, layer: usize, positions: &[usize]) {
        let buf = self.velocity[layer].0.as_mut_slice();
        for &i in positions {
            buf[i] = 0.0;
        }
    }
}

/// One momentum step: `v ← μ·v + (g + λ·w)`, `w ← w − η·v`, applied only at
/// active positions. Inactive weights and their velocities stay at zero.
pub fn sgd_step(net: &mut SparseNetwork, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != net.layers.len() || opt.velocity.len() != net.layers.len() {
        return Err(Error::dims("sgd_step", "layer count mismatch"));
    }
    let (lr, mu, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    for (((layer, grad), mask), (vel_w, vel_b)) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&net.masks.layers)
        .zip(opt.velocity.iter_mut())
    {
        if grad.weights.shape() != layer.weights.shape() || vel_w.shape() != layer.weights.shape() {
            return Err(Error::dims("sgd_step", "weight gradient shape"));
        }
        let w = layer.weights.as_mut_slice();
        let v = vel_w.as_mut_slice();
        for (i, &g) in grad.weights.as_slice().iter().enumerate() {
            if mask.active[i] {
                v[i] = mu * v[i] + (g + wd * w[i]);
                w[i] -= lr * v[i];
            } else {
                v[i] = 0.0;
                w[i] = 0.0;
            }
        }
        for ((b, vb), &g) in layer.bias.iter_mut().zip(vel_b.iter_mut()).zip(&grad.bias) {
            *vb = mu * *vb + (g + wd * *b);
            *b -= lr * *vb;
        }
    }
    Ok(())
}
