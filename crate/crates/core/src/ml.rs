//! A minimal multiclass classifier.
//!
//! Models are softmax regressors with zero or one tanh hidden layer, stored
//! as a flat parameter vector so that federated aggregation reduces to
//! elementwise arithmetic. Per layer the layout is the row-major weight
//! matrix (`out x in`) followed by the bias vector.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// Shape of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// At most one hidden layer is supported.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Architecture {
    /// Softmax regression without hidden layers.
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dims: Vec::new(), num_classes, activation: Activation::Tanh }
    }

    pub fn with_hidden(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dims: vec![hidden], num_classes, activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("architecture dimensions must be positive"));
        }
        if self.hidden_dims.len() > 1 {
            return Err(Error::config("at most one hidden layer is supported"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer width must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// A classifier: architecture plus flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    params: Vec<f64>,
}

/// Deterministic initialization: uniform in `[-0.5, 0.5] / sqrt(fan_in)`
/// for weights, zero biases.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = seed::stream(seed, "init", &[]);
    let mut params = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push((rng.random::<f64>() - 0.5) * scale);
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(Model { arch: arch.clone(), params })
}

impl Model {
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::input(format!("expected {} parameters, got {}", arch.param_count(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::input("model parameters must be finite"));
        }
        Ok(Self { arch, params })
    }

    /// All-zero parameters.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch: arch.clone(), params: vec![0.0; arch.param_count()] })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_compatible(&self, other: &Model) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::input("model architectures differ"));
        }
        Ok(())
    }

    pub fn add(&self, other: &Model) -> Result<Model> {
        self.check_compatible(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Model) -> Result<Model> {
        self.check_compatible(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn scale(&self, factor: f64) -> Model {
        Model { arch: self.arch.clone(), params: self.params.iter().map(|p| p * factor).collect() }
    }

    /// `self + factor * (other - self)`, i.e. linear interpolation towards `other`.
    pub fn lerp(&self, other: &Model, factor: f64) -> Result<Model> {
        self.check_compatible(other)?;
        Ok(self.zip_with(other, |a, b| a + factor * (b - a)))
    }

    fn zip_with(&self, other: &Model, f: impl Fn(f64, f64) -> f64) -> Model {
        Model {
            arch: self.arch.clone(),
            params: self.params.iter().zip(&other.params).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::input(format!(
                "feature row has length {}, model expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        Ok(self.forward(x).pop().unwrap_or_default())
    }

    /// Activations of every layer, input first, logits last.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.arch.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (li, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = acts.last().unwrap();
            let mut out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            if li + 1 < layers.len() {
                match self.arch.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Predicted class; equal logits resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Predictions for every row of `data`.
    pub fn predict_all(&self, data: &LabeledDataset) -> Result<Vec<usize>> {
        self.check_dataset(data)?;
        Ok(data.rows().map(|x| argmax(&self.forward(x).pop().unwrap())).collect())
    }

    fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        if data.dim() != self.arch.input_dim {
            return Err(Error::input(format!(
                "dataset has dimension {}, model expects {}",
                data.dim(),
                self.arch.input_dim
            )));
        }
        if data.num_classes() != self.arch.num_classes {
            return Err(Error::input(format!(
                "dataset has {} classes, model has {}",
                data.num_classes(),
                self.arch.num_classes
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over `data`.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        let total: f64 = data
            .iter()
            .map(|(x, y)| {
                let logits = self.forward(x).pop().unwrap();
                log_sum_exp(&logits) - logits[y]
            })
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Gradient of [`Model::loss`] with respect to the flat parameters.
    pub fn loss_gradient(&self, data: &LabeledDataset) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_gradient(data, &idx, &mut grad);
        let n = data.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(grad)
    }

    /// Adds the summed (not averaged) cross-entropy gradient of the samples
    /// `idx` into `grad`.
    fn accumulate_gradient(&self, data: &LabeledDataset, idx: &[usize], grad: &mut [f64]) {
        let layers = self.arch.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(i, o) in &layers {
            offsets.push(off);
            off += i * o + o;
        }
        for &s in idx {
            let acts = self.forward(data.row(s));
            let logits = acts.last().unwrap();
            // dL/dlogits = softmax - onehot
            let mut delta = softmax(logits);
            delta[data.label(s)] -= 1.0;
            for li in (0..layers.len()).rev() {
                let (fan_in, fan_out) = layers[li];
                let input = &acts[li];
                let w_off = offsets[li];
                let b_off = w_off + fan_in * fan_out;
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                    grad[b_off + o] += d;
                }
                if li > 0 {
                    let w = &self.params[w_off..w_off + fan_in * fan_out];
                    let mut prev = vec![0.0; fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &w[o * fan_in..(o + 1) * fan_in];
                        prev.iter_mut().zip(row).for_each(|(p, wi)| *p += d * wi);
                    }
                    // tanh'(z) = 1 - tanh(z)^2, and acts[li] holds tanh(z)
                    prev.iter_mut().zip(&acts[li]).for_each(|(p, a)| *p *= 1.0 - a * a);
                    delta = prev;
                }
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Labeled feature matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::input(format!(
                "{} feature values do not form {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { dim, num_classes, features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::input("row count differs from label count"));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("ragged feature rows"));
        }
        Self::new(dim.max(1), num_classes, rows.concat(), labels)
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self { dim, num_classes, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.rows().zip(self.labels.iter().copied())
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self { dim: self.dim, num_classes: self.num_classes, features, labels }
    }

    /// Keeps the rows for which `keep(row, label)` holds.
    pub fn filter(&self, mut keep: impl FnMut(&[f64], usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.row(i), self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.dim != other.dim || self.num_classes != other.num_classes {
            return Err(Error::input("cannot concatenate datasets of different shape"));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Copy with labels replaced by `f(row, label)`.
    pub fn relabel(&self, mut f: impl FnMut(&[f64], usize) -> usize) -> Self {
        let labels = (0..self.len()).map(|i| f(self.row(i), self.labels[i])).collect();
        Self { labels, ..self.clone() }
    }
}

/// Local training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Mini-batch SGD without momentum. The batch order is reshuffled every
/// epoch and the last partial batch is kept. Returns a new model.
pub fn train_local(model: &Model, data: &LabeledDataset, params: &TrainParams) -> Result<Model> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    model.check_dataset(data)?;
    let mut out = model.clone();
    let mut rng = seed::stream(params.seed, "batches", &[]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; out.params.len()];
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            out.accumulate_gradient(data, batch, &mut grad);
            let step = params.learning_rate / batch.len() as f64;
            out.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= step * g);
        }
    }
    if !out.is_finite() {
        return Err(Error::input("training diverged to non-finite parameters"));
    }
    Ok(out)
}

/// Fraction of correctly classified samples.
pub fn empirical_accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy of an empty dataset is undefined"));
    }
    let preds = model.predict_all(data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Per-class error rates of a model on a dataset, all normalised by `|D|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    /// `source_errors[y]`: samples of class `y` that are misclassified.
    pub source_errors: Vec<f64>,
    /// `target_errors[y]`: samples of another class predicted as `y`.
    pub target_errors: Vec<f64>,
    pub overall_error: f64,
}

pub fn per_class_errors(model: &Model, data: &LabeledDataset) -> Result<ErrorProfile> {
    if data.is_empty() {
        return Err(Error::input("error profile of an empty dataset is undefined"));
    }
    let preds = model.predict_all(data)?;
    Ok(error_profile_from_predictions(&preds, data.labels(), data.num_classes()))
}

/// Profile from parallel prediction and label slices.
pub fn error_profile_from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> ErrorProfile {
    let mut source = vec![0usize; num_classes];
    let mut target = vec![0usize; num_classes];
    let mut wrong = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if p != y {
            source[y] += 1;
            target[p] += 1;
            wrong += 1;
        }
    }
    let n = labels.len() as f64;
    ErrorProfile {
        source_errors: source.iter().map(|&c| c as f64 / n).collect(),
        target_errors: target.iter().map(|&c| c as f64 / n).collect(),
        overall_error: wrong as f64 / n,
    }
}
