//! Small fully-connected ReLU classifier with softmax cross-entropy and
//! exact backpropagated gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{ParamSet, Tensor};

/// Layer widths `[d_in, h_1, ..., d_out]`. Layer `i` owns `fc{i}.weight`
/// (`dims[i+1] x dims[i]`) and `fc{i}.bias` (`dims[i+1]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "MLP needs at least two positive widths, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn weight_name(layer: usize) -> String {
        format!("fc{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("fc{layer}.bias")
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, w) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng));
            params
                .insert(Self::weight_name(i), Tensor::Matrix(weight))
                .expect("finite init");
            params
                .insert(Self::bias_name(i), Tensor::Vector(vec![0.0; fan_out]))
                .expect("finite init");
        }
        params
    }

    /// Errors unless `params` holds exactly this network's layers.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != 2 * self.num_layers() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} tensors for MLP {:?}, found {}",
                2 * self.num_layers(),
                self.dims,
                params.len()
            )));
        }
        for (i, w) in self.dims.windows(2).enumerate() {
            let weight = params.matrix(&Self::weight_name(i))?;
            if weight.shape() != (w[1], w[0]) {
                return Err(Error::SchemaMismatch(format!(
                    "{} is {:?}, expected ({}, {})",
                    Self::weight_name(i),
                    weight.shape(),
                    w[1],
                    w[0]
                )));
            }
            let bias = params.vector(&Self::bias_name(i))?;
            if bias.len() != w[1] {
                return Err(Error::SchemaMismatch(format!(
                    "{} has length {}, expected {}",
                    Self::bias_name(i),
                    bias.len(),
                    w[1]
                )));
            }
        }
        Ok(())
    }
}

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// A dataset is just a large batch.
pub type Dataset = Batch;

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Batch {
            inputs: Matrix::new(indices.len(), d, data).expect("rows copied from a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Intermediate values kept by [`forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer: the batch itself, then each hidden activation.
    pub layer_inputs: Vec<Matrix>,
    /// Pre-activation output of each layer; the last one is the logits.
    pub pre_activations: Vec<Matrix>,
}

fn check_batch(spec: &MlpSpec, batch: &Batch) -> Result<()> {
    if batch.inputs.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, network expects {}",
            batch.inputs.cols(),
            spec.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Returns the logits (`batch x d_out`) and the cache for backprop.
pub fn forward(spec: &MlpSpec, params: &ParamSet, batch: &Batch) -> Result<(Matrix, ForwardCache)> {
    spec.check_params(params)?;
    check_batch(spec, batch)?;
    let layers = spec.num_layers();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut pre_activations = Vec::with_capacity(layers);
    let mut h = batch.inputs.clone();
    for i in 0..layers {
        let w = params.matrix(&MlpSpec::weight_name(i))?;
        let b = params.vector(&MlpSpec::bias_name(i))?;
        let mut z = h.matmul_t(w)?;
        for r in 0..z.rows() {
            for (x, bias) in z.row_mut(r).iter_mut().zip(b) {
                *x += bias;
            }
        }
        let next = if i + 1 < layers {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
            Some(a)
        } else {
            None
        };
        layer_inputs.push(h);
        pre_activations.push(z);
        match next {
            Some(a) => h = a,
            None => break,
        }
    }
    let logits = pre_activations.last().expect("at least one layer").clone();
    Ok((
        logits,
        ForwardCache {
            layer_inputs,
            pre_activations,
        },
    ))
}

/// Mean softmax cross-entropy and `d loss / d logits`.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[y];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *g = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (total / n, grad)
}

/// Mean cross-entropy loss and its exact gradient for every tensor.
pub fn loss_and_grads(spec: &MlpSpec, params: &ParamSet, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let (logits, cache) = forward(spec, params, batch)?;
    let (loss, mut dz) = cross_entropy(&logits, &batch.labels);
    let mut grads = BTreeMap::new();
    for i in (0..spec.num_layers()).rev() {
        let h = &cache.layer_inputs[i];
        let dw = dz.t_matmul(h)?;
        let mut db = vec![0.0; dz.cols()];
        for r in 0..dz.rows() {
            for (acc, g) in db.iter_mut().zip(dz.row(r)) {
                *acc += g;
            }
        }
        if i > 0 {
            let w = params.matrix(&MlpSpec::weight_name(i))?;
            let mut dh = dz.matmul(w)?;
            // ReLU subgradient at zero is zero.
            let z_prev = &cache.pre_activations[i - 1];
            dh.as_mut_slice()
                .iter_mut()
                .zip(z_prev.as_slice())
                .for_each(|(g, &z)| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            dz = dh;
        }
        grads.insert(MlpSpec::weight_name(i), Tensor::Matrix(dw));
        grads.insert(MlpSpec::bias_name(i), Tensor::Vector(db));
    }
    Ok((loss, grads))
}

/// Mean cross-entropy without gradients.
pub fn loss(spec: &MlpSpec, params: &ParamSet, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let (logits, _) = forward(spec, params, batch)?;
    Ok(cross_entropy(&logits, &batch.labels).0)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn evaluate(spec: &MlpSpec, params: &ParamSet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("cannot evaluate on an empty dataset".into()));
    }
    let (logits, _) = forward(spec, params, data)?;
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == data.labels[r])
        .count();
    Ok(correct as f64 / data.len() as f64)
}
