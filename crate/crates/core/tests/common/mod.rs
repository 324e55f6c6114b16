//! Reference implementations shared by the integration tests. Each one is
//! deliberately naive and independent of the library code it checks.
#![allow(dead_code)]

use axis_core::linalg::Matrix;
use axis_core::merge::ComponentPool;
use axis_core::net::MlpSpec;
use axis_core::params::{ParamSet, TaskVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Product of a random `rows x rank` and `rank x cols` matrix.
pub fn low_rank_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Matrix {
    let a = random_matrix(rng, rows, rank);
    let b = random_matrix(rng, rank, cols);
    a.matmul(&b).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending.
pub fn jacobi_eigenvalues(sym: &Matrix) -> Vec<f64> {
    let n = sym.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Singular values of `a` from the eigenvalues of the smaller Gram matrix.
pub fn oracle_singular_values(a: &Matrix) -> Vec<f64> {
    let gram = if a.rows() >= a.cols() {
        a.transpose().matmul(a).unwrap()
    } else {
        a.matmul(&a.transpose()).unwrap()
    };
    jacobi_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// `(source_index, comp_index)` of the `k` selected components of `layer`,
/// found by repeatedly scanning for the best remaining candidate.
pub fn scan_select(pool: &ComponentPool, layer: &str, k: usize, largest: bool) -> Vec<(usize, usize)> {
    let mut remaining: Vec<(f64, usize, usize)> = pool.layers[layer]
        .components
        .iter()
        .map(|c| (c.sigma, c.source_index, c.comp_index))
        .collect();
    let mut picked = Vec::new();
    while picked.len() < k && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (s, src, comp) = remaining[i];
            let (bs, bsrc, bcomp) = remaining[best];
            let better_sigma = if largest { s > bs } else { s < bs };
            if better_sigma || (s == bs && (src, comp) < (bsrc, bcomp)) {
                best = i;
            }
        }
        let (_, src, comp) = remaining.swap_remove(best);
        picked.push((src, comp));
    }
    picked
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Per-sample, loop-only forward pass returning logits.
pub fn naive_logits(spec: &MlpSpec, params: &ParamSet, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in 0..spec.num_layers() {
        let w = params.matrix(&MlpSpec::weight_name(layer)).unwrap();
        let b = params.vector(&MlpSpec::bias_name(layer)).unwrap();
        let mut out = vec![0.0; w.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = b[r];
            for (c, hc) in h.iter().enumerate() {
                acc += w[(r, c)] * hc;
            }
            *o = if layer + 1 < spec.num_layers() { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

/// Mean cross-entropy computed sample by sample with the naive forward pass.
pub fn naive_loss(spec: &MlpSpec, params: &ParamSet, inputs: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = naive_logits(spec, params, inputs.row(i));
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Indices zeroed by magnitude pruning, by full sort of `(|v|, index)`.
pub fn prune_oracle(values: &[f64], count: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = values.iter().map(|v| v.abs()).zip(0..).collect();
    keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut idx: Vec<usize> = keyed[..count].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

/// Task vector with random dense matrix layers and vector biases.
pub fn random_task_vector(rng: &mut ChaCha8Rng, id: &str, shapes: &[(usize, usize)]) -> TaskVector {
    let mut deltas = ParamSet::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        deltas
            .insert(format!("l{i}.weight"), Tensor::Matrix(random_matrix(rng, r, c)))
            .unwrap();
        let b: Vec<f64> = (0..r).map(|_| rng.random_range(-0.1..0.1)).collect();
        deltas.insert(format!("l{i}.bias"), Tensor::Vector(b)).unwrap();
    }
    TaskVector {
        source_id: id.to_string(),
        deltas,
    }
}

/// Task vector whose single layer has exactly the given singular values
/// (on random orthonormal-ish coordinate axes: a permuted diagonal).
pub fn diagonal_task_vector(id: &str, rows: usize, cols: usize, sigmas: &[f64]) -> TaskVector {
    let mut m = Matrix::zeros(rows, cols);
    for (i, &s) in sigmas.iter().enumerate() {
        m.as_mut_slice()[i * cols + i] = s;
    }
    let mut deltas = ParamSet::new();
    deltas.insert("w", Tensor::Matrix(m)).unwrap();
    TaskVector {
        source_id: id.to_string(),
        deltas,
    }
}

pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).unwrap();
    axis_core::linalg::frobenius_norm(&diff) / axis_core::linalg::frobenius_norm(b).max(1e-300)
}

/// Small network, pre-trained weights, a merged state with every singular
/// value learnable, and a labelled batch.
pub struct AdaptFixture {
    pub spec: MlpSpec,
    pub theta_pre: ParamSet,
    pub state: axis_core::adapt::AdaptState,
    pub batch: axis_core::net::Batch,
}

pub fn adapt_fixture(seed: u64, dims: &[usize], batch_size: usize) -> AdaptFixture {
    use axis_core::merge::{merge_pipeline, KBudget, MergeConfig};
    let spec = MlpSpec::new(dims.to_vec()).unwrap();
    let theta_pre = spec.init(seed);
    let mut r = rng(seed ^ 0xA5A5);
    let sources: Vec<TaskVector> = (0..3)
        .map(|i| {
            let mut deltas = ParamSet::new();
            for (name, t) in theta_pre.iter() {
                let d = t.map(|_| 0.0);
                let d = match d {
                    Tensor::Matrix(m) => Tensor::Matrix(Matrix::from_fn(m.rows(), m.cols(), |_, _| {
                        r.random_range(-0.2..0.2)
                    })),
                    Tensor::Vector(v) => Tensor::Vector(v.iter().map(|_| r.random_range(-0.05..0.05)).collect()),
                };
                deltas.insert(name, d).unwrap();
            }
            TaskVector {
                source_id: format!("s{i}"),
                deltas,
            }
        })
        .collect();
    let merged = merge_pipeline(&sources, &MergeConfig { k: KBudget::Fraction(0.5), ..MergeConfig::default() }).unwrap();
    let (state, _) = axis_core::adapt::split_learnable(&merged, 1.0).unwrap();
    let inputs = random_matrix(&mut r, batch_size, dims[0]);
    let labels = (0..batch_size).map(|_| r.random_range(0..*dims.last().unwrap())).collect();
    AdaptFixture {
        spec,
        theta_pre,
        state,
        batch: axis_core::net::Batch::new(inputs, labels).unwrap(),
    }
}

/// Raw payload bytes of tensor `name` in an encoded container.
pub fn tensor_bytes<'a>(bytes: &'a [u8], name: &str) -> &'a [u8] {
    let raw = axis_core::io::container::parse(bytes).unwrap();
    let end = raw
        .manifest
        .tensors
        .iter()
        .map(|t| t.offset + t.byte_len)
        .max()
        .unwrap_or(0) as usize;
    let payload = bytes.len() - end;
    let t = raw.manifest.tensors.iter().find(|t| t.name == name).unwrap();
    &bytes[payload + t.offset as usize..payload + (t.offset + t.byte_len) as usize]
}
