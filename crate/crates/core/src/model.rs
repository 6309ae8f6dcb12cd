//! Fully connected ReLU classifier with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Each layer `l` with `a` inputs and `b`
//! outputs stores its weight matrix input-major (`w[j * b + o]` connects input
//! `j` to output `o`) followed by its `b` biases. Input-major storage lets the
//! forward and backward passes skip zero activations, which dominate MNIST
//! pixels and post-ReLU hidden units.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::seed;
use crate::vecops::{self, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    params: ParamVector,
}

/// One layer in matrix form, `weights[j][o]` from input `j` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Parameter count of an MLP with the given layer widths.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return invalid("an MLP needs at least an input and an output layer");
    }
    if layer_sizes.contains(&0) {
        return invalid("layer widths must be positive");
    }
    Ok(())
}

/// Seeded fan-in-scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// for weights and biases alike.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<MlpModel> {
    check_sizes(layer_sizes)?;
    let mut rng = seed::stream_rng(seed, seed::Stream::ModelInit, &[]);
    let mut params = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for _ in 0..(w[0] * w[1] + w[1]) {
            params.push(rng.random_range(-bound..bound));
        }
    }
    MlpModel::new(layer_sizes.to_vec(), ParamVector::new(params)?)
}

/// Class decision and softmax probabilities for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 2,
            lr: 0.1,
            batch_size: 64,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    /// Local SGD steps taken on a shard of `n_samples`.
    pub fn local_steps(&self, n_samples: usize) -> usize {
        self.local_epochs * n_samples.div_ceil(self.batch_size)
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    /// Post-activation outputs per layer; `acts[0]` is unused (input is borrowed).
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn new(layer_sizes: Vec<usize>, params: ParamVector) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let expected = param_count(&layer_sizes);
        if params.dim() != expected {
            return invalid(format!("layer sizes {layer_sizes:?} need {expected} parameters, got {}", params.dim()));
        }
        Ok(MlpModel { layer_sizes, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// Returns a model with the same architecture and new parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<MlpModel> {
        MlpModel::new(self.layer_sizes.clone(), params)
    }

    /// Adds `scale * delta` to the parameters.
    pub fn apply_update(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        vecops::check_len(self.dim(), delta.len())?;
        let mut p = std::mem::replace(&mut self.params, ParamVector::zeros(1)).into_inner();
        vecops::axpy(scale, delta, &mut p);
        self.params = ParamVector::new(p)?;
        Ok(())
    }

    /// Coordinate range of the output layer (weights and biases).
    pub fn last_layer_range(&self) -> Range<usize> {
        let n = self.layer_sizes.len();
        let last = param_count(&self.layer_sizes[n - 2..]);
        self.dim() - last..self.dim()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0];
        for w in self.layer_sizes.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        offsets
    }

    pub fn unflatten(&self) -> Vec<DenseLayer> {
        let offsets = self.layer_offsets();
        self.layer_sizes
            .windows(2)
            .zip(&offsets)
            .map(|(w, &off)| {
                let (a, b) = (w[0], w[1]);
                let p = &self.params[off..off + a * b + b];
                DenseLayer {
                    weights: (0..a).map(|j| p[j * b..(j + 1) * b].to_vec()).collect(),
                    bias: p[a * b..].to_vec(),
                }
            })
            .collect()
    }

    pub fn from_layers(layers: &[DenseLayer]) -> Result<MlpModel> {
        if layers.is_empty() {
            return invalid("no layers");
        }
        let mut sizes = vec![layers[0].weights.len()];
        let mut params = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let a = layer.weights.len();
            let b = layer.bias.len();
            if a != *sizes.last().unwrap() || layer.weights.iter().any(|row| row.len() != b) {
                return invalid(format!("layer {l} has inconsistent shape"));
            }
            layer.weights.iter().for_each(|row| params.extend_from_slice(row));
            params.extend_from_slice(&layer.bias);
            sizes.push(b);
        }
        MlpModel::new(sizes, ParamVector::new(params)?)
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            acts: self.layer_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            deltas: self.layer_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Fills `ws.acts[1..]`; the last entry holds softmax probabilities.
    fn forward(&self, params: &[f64], x: &[f64], ws: &mut Workspace) {
        let n_layers = self.layer_sizes.len() - 1;
        let mut off = 0;
        for l in 0..n_layers {
            let (a, b) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &params[off..off + a * b];
            let bias = &params[off + a * b..off + a * b + b];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input: &[f64] = if l == 0 { x } else { &before[l] };
            let out = &mut after[0];
            out.copy_from_slice(bias);
            for (j, &xj) in input.iter().enumerate() {
                if xj != 0.0 {
                    vecops::axpy(xj, &w[j * b..(j + 1) * b], out);
                }
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                softmax_in_place(out);
            }
            off += a * b + b;
        }
    }

    /// Adds the cross-entropy gradient of one sample into `grad`; returns its loss.
    fn backward(&self, params: &[f64], x: &[f64], label: usize, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        self.forward(params, x, ws);
        let n_layers = self.layer_sizes.len() - 1;
        let probs = &ws.acts[n_layers];
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        {
            let top = &mut ws.deltas[n_layers];
            top.copy_from_slice(probs);
            top[label] -= 1.0;
        }
        let offsets = self.layer_offsets();
        for l in (0..n_layers).rev() {
            let (a, b) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let (lower, upper) = ws.deltas.split_at_mut(l + 1);
            let delta_out = &upper[0];
            let input: &[f64] = if l == 0 { x } else { &ws.acts[l] };
            let gw = &mut grad[off..off + a * b + b];
            for (j, &xj) in input.iter().enumerate() {
                if xj != 0.0 {
                    vecops::axpy(xj, delta_out, &mut gw[j * b..(j + 1) * b]);
                }
            }
            vecops::axpy(1.0, delta_out, &mut gw[a * b..]);
            if l > 0 {
                let w = &params[off..off + a * b];
                let delta_in = &mut lower[l];
                for (j, d) in delta_in.iter_mut().enumerate() {
                    // ReLU derivative: zero where the activation was clamped
                    *d = if input[j] > 0.0 {
                        vecops::dot(&w[j * b..(j + 1) * b], delta_out)
                    } else {
                        0.0
                    };
                }
            }
        }
        loss
    }

    fn check_input(&self, data: &LabeledDataset) -> Result<()> {
        if data.feat_dim() != self.input_dim() {
            return invalid(format!(
                "dataset has {} features, model expects {}",
                data.feat_dim(),
                self.input_dim()
            ));
        }
        if data.num_classes() > self.num_classes() {
            return invalid("dataset has more classes than the model outputs");
        }
        Ok(())
    }

    pub fn predict(&self, features: &[f64]) -> Result<Prediction> {
        vecops::check_len(self.input_dim(), features.len())?;
        let mut ws = self.workspace();
        self.forward(&self.params, features, &mut ws);
        let probs = ws.acts.pop().expect("output layer");
        let mut label = 0;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[label] {
                label = c;
            }
        }
        Ok(Prediction { label, probs })
    }

    /// Predicted labels for every row of `data`.
    pub fn predict_labels(&self, data: &LabeledDataset) -> Result<Vec<usize>> {
        self.check_input(data)?;
        let mut ws = self.workspace();
        let n_layers = self.layer_sizes.len() - 1;
        Ok((0..data.len())
            .map(|i| {
                self.forward(&self.params, data.sample(i), &mut ws);
                let probs = &ws.acts[n_layers];
                let mut label = 0;
                for (c, &p) in probs.iter().enumerate() {
                    if p > probs[label] {
                        label = c;
                    }
                }
                label
            })
            .collect())
    }

    /// Mean cross-entropy over the rows in `indices` (all rows when `None`).
    pub fn loss(&self, data: &LabeledDataset, indices: Option<&[usize]>) -> Result<f64> {
        self.check_input(data)?;
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..data.len()).collect();
                &all
            }
        };
        if idx.is_empty() {
            return invalid("loss over an empty batch");
        }
        let mut ws = self.workspace();
        let n_layers = self.layer_sizes.len() - 1;
        let total: f64 = idx
            .iter()
            .map(|&i| {
                self.forward(&self.params, data.sample(i), &mut ws);
                -ws.acts[n_layers][data.label(i)].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        Ok(total / idx.len() as f64)
    }

    /// Mean cross-entropy gradient over the rows in `indices` (all rows when `None`).
    pub fn gradient(&self, data: &LabeledDataset, indices: Option<&[usize]>) -> Result<Vec<f64>> {
        self.check_input(data)?;
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..data.len()).collect();
                &all
            }
        };
        if idx.is_empty() {
            return invalid("gradient over an empty batch");
        }
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.dim()];
        for &i in idx {
            self.backward(&self.params, data.sample(i), data.label(i), &mut ws, &mut grad);
        }
        let inv = 1.0 / idx.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok(grad)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Runs mini-batch SGD from `model` on `data` and returns the parameter change.
///
/// Batches are reshuffled every epoch from `cfg.seed`. The input model is untouched.
pub fn local_train(model: &MlpModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ParamVector> {
    cfg.validate()?;
    model.check_input(data)?;
    if data.is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    let d = model.dim();
    let start = model.params.as_slice();
    let mut params = start.to_vec();
    let mut grad = vec![0.0; d];
    let mut velocity = if cfg.momentum > 0.0 { vec![0.0; d] } else { Vec::new() };
    let mut ws = model.workspace();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                model.backward(&params, data.sample(i), data.label(i), &mut ws, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            if cfg.momentum > 0.0 {
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = cfg.momentum * *v + g * scale;
                }
                vecops::axpy(-cfg.lr, &velocity, &mut params);
            } else {
                vecops::axpy(-cfg.lr * scale, &grad, &mut params);
            }
        }
    }

    let delta: Vec<f64> = params.iter().zip(start).map(|(p, s)| p - s).collect();
    ParamVector::new(delta)
}
