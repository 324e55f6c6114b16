//! Named parameter sets, task vectors and the elementwise arithmetic
//! between them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A single parameter tensor. Whether a layer is matrix- or vector-kind is
/// carried explicitly rather than guessed from its shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Matrix(Matrix),
    Vector(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl Tensor {
    pub fn kind(&self) -> TensorKind {
        match self {
            Tensor::Matrix(m) => TensorKind::Matrix {
                rows: m.rows(),
                cols: m.cols(),
            },
            Tensor::Vector(v) => TensorKind::Vector { len: v.len() },
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Tensor::Matrix(m) => m.as_slice(),
            Tensor::Vector(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Matrix(m) => m.as_mut_slice(),
            Tensor::Vector(v) => v,
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Tensor::Matrix(m) => Some(m),
            Tensor::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Tensor::Matrix(_) => None,
            Tensor::Vector(v) => Some(v),
        }
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Tensor::Matrix(_))
    }

    /// Same kind and shape, every entry mapped through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = self.clone();
        out.values_mut().iter_mut().for_each(|x| *x = f(*x));
        out
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.kind(), other.kind());
        let mut out = self.clone();
        out.values_mut()
            .iter_mut()
            .zip(other.values())
            .for_each(|(x, &y)| *x = f(*x, y));
        out
    }
}

/// Ordered map from layer name to tensor. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a layer. Non-finite values are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if tensor.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("layer `{name}` has non-finite values")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        match self.entries.get(name) {
            Some(Tensor::Matrix(m)) => Ok(m),
            Some(Tensor::Vector(_)) => Err(Error::SchemaMismatch(format!(
                "layer `{name}` is vector-kind, expected a matrix"
            ))),
            None => Err(Error::SchemaMismatch(format!("missing layer `{name}`"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        match self.entries.get(name) {
            Some(Tensor::Vector(v)) => Ok(v),
            Some(Tensor::Matrix(_)) => Err(Error::SchemaMismatch(format!(
                "layer `{name}` is matrix-kind, expected a vector"
            ))),
            None => Err(Error::SchemaMismatch(format!("missing layer `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn matrix_layers(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.iter()
            .filter_map(|(k, t)| t.as_matrix().map(|m| (k, m)))
    }

    pub fn vector_layers(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.iter()
            .filter_map(|(k, t)| t.as_vector().map(|v| (k, v)))
    }

    /// Total number of scalars across all layers.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.values().len()).sum()
    }

    /// Errors unless both sets have identical names and per-layer kinds.
    pub fn check_same_schema(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() || !self.names().eq(other.names()) {
            return Err(Error::SchemaMismatch(format!(
                "layer sets differ: [{}] vs [{}]",
                self.names().collect::<Vec<_>>().join(", "),
                other.names().collect::<Vec<_>>().join(", ")
            )));
        }
        for ((name, a), (_, b)) in self.iter().zip(other.iter()) {
            if a.kind() != b.kind() {
                return Err(Error::SchemaMismatch(format!(
                    "layer `{name}`: {:?} vs {:?}",
                    a.kind(),
                    b.kind()
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Per-layer difference between a fine-tuned model and its pre-trained origin.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub source_id: String,
    pub deltas: ParamSet,
}

impl TaskVector {
    pub fn matrix_layers(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.deltas.matrix_layers()
    }
}

/// `theta_ft - theta_pre`, layer by layer.
pub fn task_vector(theta_ft: &ParamSet, theta_pre: &ParamSet, source_id: &str) -> Result<TaskVector> {
    theta_ft.check_same_schema(theta_pre)?;
    let deltas = theta_ft
        .iter()
        .zip(theta_pre.iter())
        .map(|((name, ft), (_, pre))| (name.to_string(), ft.zip_map(pre, |a, b| a - b)))
        .collect();
    Ok(TaskVector {
        source_id: source_id.to_string(),
        deltas,
    })
}

/// Elementwise mean of every vector-kind layer across sources.
///
/// Each element is summed in sorted order so the result does not depend on
/// the order of `task_vectors`.
pub fn average_nonmatrix(task_vectors: &[TaskVector]) -> Result<BTreeMap<String, Vec<f64>>> {
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no task vectors to average".into()))?;
    for tv in &task_vectors[1..] {
        tv.deltas.check_same_schema(&first.deltas)?;
    }
    let count = task_vectors.len() as f64;
    let mut out = BTreeMap::new();
    let mut column = Vec::with_capacity(task_vectors.len());
    for (name, proto) in first.deltas.vector_layers() {
        let sources: Vec<&[f64]> = task_vectors
            .iter()
            .map(|tv| tv.deltas.vector(name))
            .collect::<Result<_>>()?;
        let mean = (0..proto.len())
            .map(|i| {
                column.clear();
                column.extend(sources.iter().map(|s| s[i]));
                column.sort_by(f64::total_cmp);
                column.iter().sum::<f64>() / count
            })
            .collect();
        out.insert(name.to_string(), mean);
    }
    Ok(out)
}

/// `theta_pre + scale * delta` for every layer that has a delta; other
/// layers pass through untouched.
pub fn apply_delta(
    theta_pre: &ParamSet,
    matrix_deltas: &BTreeMap<String, Matrix>,
    vector_deltas: &BTreeMap<String, Vec<f64>>,
    scale: f64,
) -> Result<ParamSet> {
    let mut out = theta_pre.clone();
    for (name, delta) in matrix_deltas {
        let base = theta_pre.matrix(name)?;
        if base.shape() != delta.shape() {
            return Err(Error::SchemaMismatch(format!(
                "layer `{name}`: delta {:?} vs weights {:?}",
                delta.shape(),
                base.shape()
            )));
        }
        let t = Tensor::Matrix(base.clone()).zip_map(&Tensor::Matrix(delta.clone()), |a, d| a + scale * d);
        out.insert(name.clone(), t)?;
    }
    for (name, delta) in vector_deltas {
        let base = theta_pre.vector(name)?;
        if base.len() != delta.len() {
            return Err(Error::SchemaMismatch(format!(
                "layer `{name}`: delta length {} vs {}",
                delta.len(),
                base.len()
            )));
        }
        let v = base.iter().zip(delta).map(|(a, d)| a + scale * d).collect();
        out.insert(name.clone(), Tensor::Vector(v))?;
    }
    Ok(out)
}

/// Applies every layer of a task vector at the given scale.
pub fn apply_task_vector(theta_pre: &ParamSet, tv: &TaskVector, scale: f64) -> Result<ParamSet> {
    let matrices = tv
        .deltas
        .matrix_layers()
        .map(|(k, m)| (k.to_string(), m.clone()))
        .collect();
    let vectors = tv
        .deltas
        .vector_layers()
        .map(|(k, v)| (k.to_string(), v.to_vec()))
        .collect();
    apply_delta(theta_pre, &matrices, &vectors, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    fn tv_with_bias(id: &str, bias: Vec<f64>) -> TaskVector {
        let mut p = single("w", Tensor::Matrix(Matrix::identity(2)));
        p.insert("b", Tensor::Vector(bias)).unwrap();
        TaskVector {
            source_id: id.into(),
            deltas: p,
        }
    }

    #[test]
    fn difference_of_single_layer() {
        let ft = single("w", Tensor::Matrix(Matrix::new(1, 2, vec![1.0, 2.0]).unwrap()));
        let pre = single("w", Tensor::Matrix(Matrix::new(1, 2, vec![0.0, 2.0]).unwrap()));
        let tv = task_vector(&ft, &pre, "a").unwrap();
        assert_eq!(tv.deltas.matrix("w").unwrap().as_slice(), &[1.0, 0.0]);
        let zero = task_vector(&pre, &pre, "z").unwrap();
        assert!(zero.deltas.iter().all(|(_, t)| t.values().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn schema_mismatch_detected() {
        let a = single("w", Tensor::Vector(vec![1.0, 2.0]));
        let b = single("w", Tensor::Vector(vec![1.0]));
        let c = single("x", Tensor::Vector(vec![1.0, 2.0]));
        // A 1x2 matrix is not the same layer as a length-2 vector.
        let d = single("w", Tensor::Matrix(Matrix::new(1, 2, vec![1.0, 2.0]).unwrap()));
        for other in [b, c, d] {
            assert!(matches!(task_vector(&a, &other, "s"), Err(Error::SchemaMismatch(_))));
        }
    }

    #[test]
    fn averaging_vector_layers() {
        assert!(matches!(average_nonmatrix(&[]), Err(Error::EmptyInput(_))));
        let one = average_nonmatrix(&[tv_with_bias("a", vec![2.0, -1.0])]).unwrap();
        assert_eq!(one["b"], vec![2.0, -1.0]);
        assert!(!one.contains_key("w"));
        let two = average_nonmatrix(&[tv_with_bias("a", vec![2.0]), tv_with_bias("b", vec![4.0])]).unwrap();
        assert_eq!(two["b"], vec![3.0]);
    }

    #[test]
    fn apply_delta_endpoints() {
        let pre = single("w", Tensor::Matrix(Matrix::new(1, 2, vec![0.5, -1.5]).unwrap()));
        let deltas = BTreeMap::from([("w".to_string(), Matrix::new(1, 2, vec![3.0, 7.0]).unwrap())]);
        let same = apply_delta(&pre, &deltas, &BTreeMap::new(), 0.0).unwrap();
        assert_eq!(same, pre);
        let full = apply_delta(&pre, &deltas, &BTreeMap::new(), 1.0).unwrap();
        assert_eq!(full.matrix("w").unwrap().as_slice(), &[3.5, 5.5]);

        let unknown = BTreeMap::from([("nope".to_string(), Matrix::zeros(1, 2))]);
        assert!(matches!(
            apply_delta(&pre, &unknown, &BTreeMap::new(), 1.0),
            Err(Error::SchemaMismatch(_))
        ));
        let wrong_shape = BTreeMap::from([("w".to_string(), Matrix::zeros(2, 1))]);
        assert!(apply_delta(&pre, &wrong_shape, &BTreeMap::new(), 1.0).is_err());
    }

    #[test]
    fn insert_rejects_nan() {
        let mut p = ParamSet::new();
        assert!(p.insert("b", Tensor::Vector(vec![f64::NAN])).is_err());
    }
}
