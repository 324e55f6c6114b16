//! Stage two: train only the leading singular values of the merged delta on
//! the target task while the singular vectors and the tail stay frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::merge::{assemble, MergedDelta};
use crate::net::{evaluate, loss_and_grads, Dataset, MlpSpec};
use crate::params::{ParamSet, Tensor};

/// Frozen bases and learnable singular values of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptLayer {
    pub u: Matrix,
    pub v: Matrix,
    /// The leading N singular values; the only trained quantities.
    pub lambda: Vec<f64>,
    pub s_frozen: Vec<f64>,
}

impl AdaptLayer {
    pub fn singular_values(&self) -> Vec<f64> {
        self.lambda.iter().chain(&self.s_frozen).copied().collect()
    }

    /// `U diag(lambda, s_frozen) V^T`.
    pub fn delta(&self) -> Matrix {
        assemble(&self.u, &self.singular_values(), &self.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    pub layers: BTreeMap<String, AdaptLayer>,
    /// Averaged non-matrix deltas, frozen.
    pub vector_deltas: BTreeMap<String, Vec<f64>>,
    pub n_fraction: f64,
}

impl AdaptState {
    /// Number of trained scalars.
    pub fn learnable_count(&self) -> usize {
        self.layers.values().map(|l| l.lambda.len()).sum()
    }
}

/// Number of learnable values for a layer of `width` singular values.
pub fn learnable_width(width: usize, n_fraction: f64) -> usize {
    if width == 0 {
        return 0;
    }
    ((n_fraction * width as f64).round() as usize).clamp(1, width)
}

/// Splits every merged layer into the top-N learnable values and the frozen
/// remainder, with `N = max(1, round(n_fraction * width))`.
pub fn split_learnable(merged: &MergedDelta, n_fraction: f64) -> Result<(AdaptState, Vec<String>)> {
    if !(n_fraction > 0.0 && n_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "n_fraction must be in (0, 1], got {n_fraction}"
        )));
    }
    let mut warnings = Vec::new();
    let mut layers = BTreeMap::new();
    for (name, layer) in &merged.layers {
        if layer.s.is_empty() {
            warnings.push(format!("layer `{name}` has no singular values; nothing to learn"));
        }
        let n = learnable_width(layer.s.len(), n_fraction);
        layers.insert(
            name.clone(),
            AdaptLayer {
                u: layer.u.clone(),
                v: layer.v.clone(),
                lambda: layer.s[..n].to_vec(),
                s_frozen: layer.s[n..].to_vec(),
            },
        );
    }
    Ok((
        AdaptState {
            layers,
            vector_deltas: merged.vector_deltas.clone(),
            n_fraction,
        },
        warnings,
    ))
}

/// `theta_pre + U diag(lambda, s_frozen) V^T` per matrix layer plus the
/// frozen vector deltas.
pub fn assemble_weights(state: &AdaptState, theta_pre: &ParamSet) -> Result<ParamSet> {
    let mut out = theta_pre.clone();
    for (name, layer) in &state.layers {
        let base = theta_pre.matrix(name)?;
        let delta = layer.delta();
        if delta.shape() != base.shape() {
            return Err(Error::SchemaMismatch(format!(
                "layer `{name}`: delta {:?} vs weights {:?}",
                delta.shape(),
                base.shape()
            )));
        }
        out.insert(name.clone(), Tensor::Matrix(base.add(&delta)?))?;
    }
    for (name, delta) in &state.vector_deltas {
        let base = theta_pre.vector(name)?;
        if base.len() != delta.len() {
            return Err(Error::SchemaMismatch(format!(
                "layer `{name}`: delta length {} vs {}",
                delta.len(),
                base.len()
            )));
        }
        let v = base.iter().zip(delta).map(|(a, d)| a + d).collect();
        out.insert(name.clone(), Tensor::Vector(v))?;
    }
    Ok(out)
}

/// `d loss / d sigma_j = u_j^T G v_j` for `j < n`, where `G` is the loss
/// gradient with respect to the assembled weight matrix.
pub fn sigma_gradient(u: &Matrix, v: &Matrix, grad_w: &Matrix, n: usize) -> Result<Vec<f64>> {
    if grad_w.shape() != (u.rows(), v.rows()) {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} does not match factors {}x{}",
            grad_w.shape(),
            u.rows(),
            v.rows()
        )));
    }
    if n > u.cols() || n > v.cols() {
        return Err(Error::InvalidInput(format!(
            "{n} singular values requested from factors of width {}",
            u.cols().min(v.cols())
        )));
    }
    (0..n)
        .map(|j| {
            let gv = grad_w.matmul(&Matrix::new(v.rows(), 1, v.col(j))?)?;
            Ok(dot(&u.col(j), gv.as_slice()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// `epoch,loss,train_acc,test_acc` with a header; a missing test accuracy
/// is an empty field.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,train_acc,test_acc\n");
    for h in history {
        let test = h.test_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", h.epoch, h.loss, h.train_acc, test);
    }
    s
}

/// Visits the training set in seeded shuffled mini-batches, one shuffle per
/// epoch, calling `step` with each batch.
pub(crate) fn for_each_batch(
    data: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&Dataset) -> Result<()>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(batch_size) {
        step(&data.subset(chunk))?;
    }
    Ok(())
}

/// Plain SGD on the learnable singular values only.
pub fn train(
    state: &AdaptState,
    theta_pre: &ParamSet,
    spec: &MlpSpec,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(AdaptState, Vec<EpochStats>)> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    let mut state = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for_each_batch(train_data, cfg.batch_size, &mut rng, |batch| {
            let params = assemble_weights(&state, theta_pre)?;
            let (loss, grads) = loss_and_grads(spec, &params, batch)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            loss_sum += loss;
            batches += 1;
            for (name, layer) in state.layers.iter_mut() {
                let grad_w = grads
                    .get(name)
                    .and_then(Tensor::as_matrix)
                    .ok_or_else(|| Error::SchemaMismatch(format!("network has no weight `{name}`")))?;
                let g = sigma_gradient(&layer.u, &layer.v, grad_w, layer.lambda.len())?;
                for (l, gj) in layer.lambda.iter_mut().zip(g) {
                    *l -= cfg.learning_rate * gj;
                }
                if layer.lambda.iter().any(|l| !l.is_finite()) {
                    return Err(Error::DivergenceDetected { epoch });
                }
            }
            Ok(())
        })?;
        let params = assemble_weights(&state, theta_pre)?;
        let train_acc = evaluate(spec, &params, train_data)?;
        let test_acc = test_data.map(|d| evaluate(spec, &params, d)).transpose()?;
        history.push(EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            train_acc,
            test_acc,
        });
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{MergedLayer, Provenance};

    fn merged_with(s: Vec<f64>) -> MergedDelta {
        let n = s.len();
        MergedDelta {
            layers: BTreeMap::from([(
                "fc0.weight".to_string(),
                MergedLayer {
                    u: Matrix::identity(n),
                    s,
                    v: Matrix::identity(n),
                    orthogonal: true,
                },
            )]),
            vector_deltas: BTreeMap::new(),
            provenance: Provenance {
                strategy: "top".into(),
                k: "3".into(),
                layer_k: BTreeMap::new(),
                source_ids: vec![],
                final_svd: true,
                seed: 0,
                rank_tol: 0.0,
                warnings: vec![],
            },
        }
    }

    #[test]
    fn split_rounding() {
        let (st, _) = split_learnable(&merged_with(vec![5.0, 3.0, 1.0]), 0.34).unwrap();
        let l = &st.layers["fc0.weight"];
        assert_eq!(l.lambda, vec![5.0]);
        assert_eq!(l.s_frozen, vec![3.0, 1.0]);
        let (st, _) = split_learnable(&merged_with(vec![5.0, 3.0, 1.0]), 1.0).unwrap();
        assert!(st.layers["fc0.weight"].s_frozen.is_empty());
        assert_eq!(st.learnable_count(), 3);
    }

    #[test]
    fn split_rejects_bad_fraction_and_warns_on_empty() {
        assert!(split_learnable(&merged_with(vec![1.0]), 0.0).is_err());
        assert!(split_learnable(&merged_with(vec![1.0]), 1.2).is_err());
        let (st, warnings) = split_learnable(&merged_with(vec![]), 0.5).unwrap();
        assert_eq!(st.learnable_count(), 0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn learnable_width_bounds() {
        assert_eq!(learnable_width(0, 0.1), 0);
        assert_eq!(learnable_width(6, 0.1), 1);
        assert_eq!(learnable_width(76, 0.1), 8);
        assert_eq!(learnable_width(10, 1.0), 10);
    }

    #[test]
    fn sigma_gradient_identity_factors() {
        let g = Matrix::from_diag(&[0.5, -2.0, 3.0]);
        let i = Matrix::identity(3);
        assert_eq!(sigma_gradient(&i, &i, &g, 3).unwrap(), vec![0.5, -2.0, 3.0]);
        assert_eq!(sigma_gradient(&i, &i, &Matrix::zeros(3, 3), 2).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(sigma_gradient(&i, &i, &g, 4), Err(Error::InvalidInput(_))));
        assert!(sigma_gradient(&i, &i, &Matrix::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = [
            EpochStats { epoch: 1, loss: 0.5, train_acc: 0.75, test_acc: Some(0.5) },
            EpochStats { epoch: 2, loss: 0.25, train_acc: 1.0, test_acc: None },
        ];
        assert_eq!(history_csv(&h), "epoch,loss,train_acc,test_acc\n1,0.5,0.75,0.5\n2,0.25,1,\n");
    }
}
