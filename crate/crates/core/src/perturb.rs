//! Perturbations for the robustness studies: Gaussian corruption and
//! magnitude pruning of task vectors, and patch dropout on inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::frobenius_norm;
use crate::net::Batch;
use crate::params::{ParamSet, TaskVector, Tensor};

/// Adds i.i.d. zero-mean Gaussian noise to every matrix layer, with standard
/// deviation `ratio * ||layer||_F`. Vector layers are untouched.
///
/// Layer `i` (lexicographic) draws from ChaCha8 stream `i` of `seed`.
pub fn gaussian_corrupt(tv: &TaskVector, ratio: f64, seed: u64) -> Result<TaskVector> {
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(Error::InvalidInput(format!("noise ratio must be >= 0, got {ratio}")));
    }
    if ratio == 0.0 {
        return Ok(tv.clone());
    }
    let mut deltas = ParamSet::new();
    for (ordinal, (name, tensor)) in tv.deltas.iter().enumerate() {
        let out = match tensor {
            Tensor::Matrix(m) => {
                let std = ratio * frobenius_norm(m);
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidInput(format!("noise std {std}: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ordinal as u64);
                let mut noisy = m.clone();
                noisy
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|x| *x += normal.sample(&mut rng));
                Tensor::Matrix(noisy)
            }
            Tensor::Vector(_) => tensor.clone(),
        };
        deltas.insert(name, out)?;
    }
    Ok(TaskVector {
        source_id: tv.source_id.clone(),
        deltas,
    })
}

/// Number of entries zeroed when pruning `numel` values at `sparsity`.
pub fn pruned_count(numel: usize, sparsity: f64) -> usize {
    // The small slack keeps decimal fractions like 0.95 * 20 from flooring to 18.
    (((sparsity * numel as f64) + 1e-9).floor() as usize).min(numel)
}

/// Zeroes the `floor(sparsity * numel)` smallest-magnitude entries of each
/// matrix layer; ties go to the lower flattened index first.
pub fn magnitude_prune(tv: &TaskVector, sparsity: f64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidInput(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let mut deltas = ParamSet::new();
    for (name, tensor) in tv.deltas.iter() {
        let mut out = tensor.clone();
        if let Tensor::Matrix(m) = &mut out {
            let values = m.as_mut_slice();
            let count = pruned_count(values.len(), sparsity);
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
            for &i in &order[..count] {
                values[i] = 0.0;
            }
        }
        deltas.insert(name, out)?;
    }
    Ok(TaskVector {
        source_id: tv.source_id.clone(),
        deltas,
    })
}

/// Zeroes `round(fraction * num_patches)` contiguous feature patches per
/// sample.
///
/// The mask of sample `i` depends only on `(seed, i)` (ChaCha8 stream `i`),
/// so every method evaluated with the same seed sees the same masks.
pub fn patch_dropout(batch: &Batch, patch_size: usize, fraction: f64, seed: u64) -> Result<Batch> {
    let d = batch.inputs.cols();
    if patch_size == 0 || !d.is_multiple_of(patch_size) {
        return Err(Error::InvalidInput(format!(
            "{d} features cannot be split into patches of {patch_size}"
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("dropout fraction must be in [0, 1], got {fraction}")));
    }
    let patches = d / patch_size;
    let dropped = ((fraction * patches as f64).round() as usize).min(patches);
    let mut out = batch.clone();
    if dropped == 0 {
        return Ok(out);
    }
    for i in 0..out.len() {
        let mask = patch_mask(seed, i, patches, dropped);
        let row = out.inputs.row_mut(i);
        for p in mask {
            row[p * patch_size..(p + 1) * patch_size].fill(0.0);
        }
    }
    Ok(out)
}

/// Indices of the patches dropped for sample `sample`.
pub fn patch_mask(seed: u64, sample: usize, patches: usize, dropped: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    let mut idx = rand::seq::index::sample(&mut rng, patches, dropped).into_vec();
    idx.sort_unstable();
    idx
}
