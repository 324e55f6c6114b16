//! Desk-scale experiment harness: a synthetic family of related
//! classification tasks, pre-training and source fine-tuning, and the
//! leave-one-out merge / adapt protocol with its sweeps.
//!
//! Every task shares the same class prototypes. A task sees its inputs
//! through a rotation made of a family-wide part (shared by all tasks, and
//! moving discriminative directions the pre-trained model relies on) and a
//! task-specific part, plus a small per-task prototype shift. Sources
//! therefore carry transferable structure without being copies of the
//! target.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adapt::{self, assemble_weights, for_each_batch, split_learnable, TrainConfig};
use crate::calibrate::{self, spectral_rescale};
use crate::error::{Error, Result};
use crate::io::container::{write_container, ContainerObject};
use crate::io::KvConfig;
use crate::linalg::{dot, Matrix};
use crate::merge::{merge_pipeline, KBudget, MergeConfig, SelectionStrategy, DEFAULT_RANK_TOL};
use crate::net::{evaluate, loss_and_grads, Dataset, MlpSpec};
use crate::params::{apply_delta, task_vector, ParamSet, TaskVector};
use crate::perturb::{gaussian_corrupt, magnitude_prune, patch_dropout};

/// Mean accuracies reported for the full-scale setting (ViT-B/32, 16
/// sources, 21 targets). Echoed in report headers for orientation only.
pub const REFERENCE_FULL_SCALE_ACCURACY: [(&str, f64); 2] = [("axis", 78.42), ("atlas", 75.13)];

/// Mixes a base seed with a path of indices (SplitMix64 finalizer per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyConfig {
    pub tasks: usize,
    pub d_in: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Std of the prototype entries.
    pub prototype_scale: f64,
    /// Std of the isotropic per-sample noise.
    pub noise_std: f64,
    /// Planes of the family-wide rotation, each pairing a discriminative
    /// direction with a non-discriminative one.
    pub shared_planes: usize,
    pub shared_angle_deg: f64,
    /// Each task scales the shared angle by a factor drawn uniformly from
    /// `[1 - spread, 1 + spread]`.
    pub shared_angle_spread: f64,
    /// Planes of the random task-specific rotation.
    pub task_planes: usize,
    pub task_angle_deg: f64,
    /// Std of the per-task, per-class prototype shift.
    pub prototype_shift: f64,
    /// Sanity mode: every task reuses task 0's transformation.
    pub identical_tasks: bool,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            tasks: 6,
            d_in: 64,
            classes: 8,
            train_samples: 2000,
            test_samples: 500,
            prototype_scale: 0.45,
            noise_std: 1.0,
            shared_planes: 2,
            shared_angle_deg: 80.0,
            shared_angle_spread: 0.6,
            task_planes: 6,
            task_angle_deg: 35.0,
            prototype_shift: 0.1,
            identical_tasks: false,
            seed: 2024,
        }
    }
}

impl FamilyConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.tasks < 2 {
            return bad(format!("a task family needs at least 2 tasks, got {}", self.tasks));
        }
        if self.classes < 2 || self.d_in < 2 {
            return bad(format!("degenerate sizes: d_in = {}, classes = {}", self.d_in, self.classes));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train and test sets must be non-empty".into());
        }
        if self.shared_planes > self.classes - 1 || self.classes - 1 + self.shared_planes > self.d_in {
            return bad(format!(
                "{} shared planes do not fit {} classes in {} dims",
                self.shared_planes, self.classes, self.d_in
            ));
        }
        if 2 * self.task_planes > self.d_in {
            return bad(format!("{} task planes do not fit {} dims", self.task_planes, self.d_in));
        }
        if !(0.0..=1.0).contains(&self.shared_angle_spread) {
            return bad(format!("shared_angle_spread must be in [0, 1], got {}", self.shared_angle_spread));
        }
        if !(self.prototype_scale > 0.0 && self.noise_std >= 0.0 && self.prototype_shift >= 0.0) {
            return bad("scales must be non-negative and prototype_scale positive".into());
        }
        Ok(())
    }
}

/// How a task's inputs are produced from the shared prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDescriptor {
    pub rotation: Matrix,
    /// `classes x d_in`, added to the prototypes before rotation.
    pub prototype_shift: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub train: Dataset,
    pub test: Dataset,
    pub descriptor: TaskDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub config: FamilyConfig,
    pub prototypes: Matrix,
    /// Untransformed distribution used for pre-training.
    pub base: Dataset,
    pub tasks: Vec<Task>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Gram-Schmidt (twice) over `seeds` then random fill-ins until `d`
/// orthonormal vectors exist.
fn orthonormal_basis(d: usize, seeds: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let candidates = seeds.iter().cloned().chain(std::iter::repeat_with(|| gaussian_vec(rng, d, 1.0)));
    for mut v in candidates {
        if basis.len() == d {
            break;
        }
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bx)| *x -= proj * bx);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Rotation by `angle` (radians) within each plane `(p, q)`; planes must be
/// mutually orthogonal.
fn plane_rotation(d: usize, planes: &[(&[f64], &[f64], f64)]) -> Matrix {
    let mut r = Matrix::identity(d);
    for &(p, q, angle) in planes {
        let (c, s) = (angle.cos(), angle.sin());
        for i in 0..d {
            for j in 0..d {
                r[(i, j)] += (c - 1.0) * (p[i] * p[j] + q[i] * q[j]) + s * (q[i] * p[j] - p[i] * q[j]);
            }
        }
    }
    r
}

fn sample_dataset(
    prototypes: &Matrix,
    descriptor: Option<&TaskDescriptor>,
    n: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let (classes, d) = prototypes.shape();
    let mut inputs = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..classes);
        let mut mean: Vec<f64> = prototypes.row(y).to_vec();
        if let Some(desc) = descriptor {
            mean.iter_mut()
                .zip(desc.prototype_shift.row(y))
                .for_each(|(m, s)| *m += s);
            mean = (0..d).map(|r| dot(desc.rotation.row(r), &mean)).collect();
        }
        let noise = gaussian_vec(rng, d, noise_std);
        for ((x, m), e) in inputs.row_mut(i).iter_mut().zip(&mean).zip(&noise) {
            *x = m + e;
        }
        labels.push(y);
    }
    Dataset::new(inputs, labels).expect("rows and labels generated together")
}

/// Generates the synthetic task family. Identical configs give identical
/// datasets.
pub fn gen_tasks(cfg: &FamilyConfig) -> Result<TaskFamily> {
    cfg.validate()?;
    let (d, classes) = (cfg.d_in, cfg.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let prototypes = Matrix::new(classes, d, gaussian_vec(&mut rng, classes * d, cfg.prototype_scale))?;

    // Centered prototypes span the discriminative subspace.
    let centroid: Vec<f64> = (0..d)
        .map(|j| (0..classes).map(|c| prototypes[(c, j)]).sum::<f64>() / classes as f64)
        .collect();
    let centered: Vec<Vec<f64>> = (0..classes - 1)
        .map(|c| prototypes.row(c).iter().zip(&centroid).map(|(p, m)| p - m).collect())
        .collect();
    let family_basis = orthonormal_basis(d, &centered, &mut rng);
    let discriminative = classes - 1;

    let mut descriptors: Vec<TaskDescriptor> = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, t as u64]));
        let basis = orthonormal_basis(d, &[], &mut trng);
        let angle = cfg.task_angle_deg.to_radians();
        let signs: Vec<f64> = (0..cfg.task_planes)
            .map(|_| if trng.random::<bool>() { angle } else { -angle })
            .collect();
        let planes: Vec<(&[f64], &[f64], f64)> = (0..cfg.task_planes)
            .map(|i| (basis[2 * i].as_slice(), basis[2 * i + 1].as_slice(), signs[i]))
            .collect();
        let shared_angle = cfg.shared_angle_deg.to_radians()
            * (1.0 + cfg.shared_angle_spread * (2.0 * trng.random::<f64>() - 1.0));
        let shared_planes: Vec<(&[f64], &[f64], f64)> = (0..cfg.shared_planes)
            .map(|i| {
                (
                    family_basis[i].as_slice(),
                    family_basis[discriminative + i].as_slice(),
                    shared_angle,
                )
            })
            .collect();
        let shared = plane_rotation(d, &shared_planes);
        let rotation = plane_rotation(d, &planes).matmul(&shared)?;
        let prototype_shift = Matrix::new(classes, d, gaussian_vec(&mut trng, classes * d, cfg.prototype_shift))?;
        descriptors.push(TaskDescriptor {
            rotation,
            prototype_shift,
        });
    }
    if cfg.identical_tasks {
        let first = descriptors[0].clone();
        descriptors.iter_mut().for_each(|d| *d = first.clone());
    }

    let mut base_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[4]));
    let base = sample_dataset(&prototypes, None, cfg.train_samples, cfg.noise_std, &mut base_rng);
    let tasks = descriptors
        .into_iter()
        .enumerate()
        .map(|(t, descriptor)| {
            let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, t as u64]));
            let mut test_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, t as u64]));
            Task {
                id: format!("task{t}"),
                train: sample_dataset(&prototypes, Some(&descriptor), cfg.train_samples, cfg.noise_std, &mut train_rng),
                test: sample_dataset(&prototypes, Some(&descriptor), cfg.test_samples, cfg.noise_std, &mut test_rng),
                descriptor,
            }
        })
        .collect();
    Ok(TaskFamily {
        config: cfg.clone(),
        prototypes,
        base,
        tasks,
    })
}

/// Full-parameter mini-batch SGD. Zero epochs returns the input unchanged.
pub fn sgd_full(
    params: &ParamSet,
    spec: &MlpSpec,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamSet> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 1..=epochs {
        for_each_batch(data, batch_size, &mut rng, |batch| {
            let (loss, grads) = loss_and_grads(spec, &params, batch)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            for (name, g) in grads {
                let updated = params
                    .get(&name)
                    .expect("gradients mirror the parameter set")
                    .clone();
                let mut updated = updated;
                updated
                    .values_mut()
                    .iter_mut()
                    .zip(g.values())
                    .for_each(|(p, gi)| *p -= learning_rate * gi);
                params
                    .insert(name, updated)
                    .map_err(|_| Error::DivergenceDetected { epoch })?;
            }
            Ok(())
        })?;
    }
    Ok(params)
}

/// Pre-trains the shared origin on the untransformed base distribution.
pub fn pretrain(family: &TaskFamily, spec: &MlpSpec, cfg: &TrainConfig) -> Result<ParamSet> {
    let init = spec.init(derive_seed(cfg.seed, &[10]));
    sgd_full(&init, spec, &family.base, cfg.epochs, cfg.learning_rate, cfg.batch_size, derive_seed(cfg.seed, &[11]))
}

/// Fine-tuned sources and their diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub task_vectors: Vec<TaskVector>,
    pub train_acc: Vec<f64>,
    /// Ids of sources that diverged (kept as zero vectors) or stayed below
    /// the 0.9 training-accuracy bar.
    pub flagged: Vec<String>,
}

pub const SOURCE_ACCURACY_BAR: f64 = 0.9;

/// Full-parameter fine-tune of every task from `theta_pre`.
pub fn finetune_sources(family: &TaskFamily, theta_pre: &ParamSet, spec: &MlpSpec, cfg: &TrainConfig) -> Result<SourceSet> {
    let mut out = SourceSet {
        task_vectors: Vec::new(),
        train_acc: Vec::new(),
        flagged: Vec::new(),
    };
    for (t, task) in family.tasks.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[20, t as u64]);
        let tuned = match sgd_full(theta_pre, spec, &task.train, cfg.epochs, cfg.learning_rate, cfg.batch_size, seed) {
            Ok(p) => p,
            Err(Error::DivergenceDetected { .. }) => {
                out.flagged.push(task.id.clone());
                theta_pre.clone()
            }
            Err(e) => return Err(e),
        };
        let acc = evaluate(spec, &tuned, &task.train)?;
        if acc < SOURCE_ACCURACY_BAR && cfg.epochs > 0 && !out.flagged.contains(&task.id) {
            out.flagged.push(task.id.clone());
        }
        out.train_acc.push(acc);
        out.task_vectors.push(task_vector(&tuned, theta_pre, &task.id)?);
    }
    Ok(out)
}

/// Perturbation applied within a leave-one-out configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    None,
    /// Gaussian noise on the first source of every aggregation.
    CorruptFirst { ratio: f64 },
    /// Magnitude pruning of every source.
    PruneAll { sparsity: f64 },
    /// Patch dropout on the target test inputs.
    PatchDropout { patch_size: usize, fraction: f64 },
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            Perturbation::CorruptFirst { ratio } => write!(f, "noise:{ratio}"),
            Perturbation::PruneAll { sparsity } => write!(f, "prune:{sparsity}"),
            Perturbation::PatchDropout { patch_size, fraction } => write!(f, "patch:{patch_size}:{fraction}"),
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    /// `none`, `noise:<ratio>`, `prune:<sparsity>`, `patch:<size>:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |x: &str| {
            x.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{x}` in perturbation `{s}`")))
        };
        match parts.as_slice() {
            ["none"] => Ok(Perturbation::None),
            ["noise", r] => Ok(Perturbation::CorruptFirst { ratio: num(r)? }),
            ["prune", p] => Ok(Perturbation::PruneAll { sparsity: num(p)? }),
            ["patch", size, frac] => Ok(Perturbation::PatchDropout {
                patch_size: size
                    .parse()
                    .map_err(|_| Error::Config(format!("bad patch size in `{s}`")))?,
                fraction: num(frac)?,
            }),
            _ => Err(Error::Config(format!("unknown perturbation `{s}`"))),
        }
    }
}

/// One merge/adapt configuration of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: SelectionStrategy,
    pub k: KBudget,
    pub n_fraction: f64,
    pub skip_final_svd: bool,
    pub perturbation: Perturbation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub runs: Vec<RunConfig>,
    pub adapt: TrainConfig,
    pub rank_tol: f64,
    /// Rescale merged spectra before adaptation.
    pub rescale: bool,
    /// Zero-shot interpolation grid evaluated per target with all sources.
    pub alphas: Vec<f64>,
    /// Fraction of the target training set available for adaptation.
    pub train_fraction: f64,
    /// Source counts to aggregate; `None` means every count `1..=T-1`.
    pub source_counts: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            runs: vec![RunConfig {
                strategy: SelectionStrategy::Top,
                k: KBudget::default(),
                n_fraction: 0.10,
                skip_final_svd: false,
                perturbation: Perturbation::None,
            }],
            adapt: TrainConfig::default(),
            rank_tol: DEFAULT_RANK_TOL,
            rescale: false,
            alphas: Vec::new(),
            train_fraction: 1.0,
            source_counts: None,
            seed: 7,
        }
    }
}

pub const BASELINE_PRETRAINED: &str = "pretrained";
pub const BASELINE_MEAN_MERGE: &str = "mean_merge";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub target: String,
    pub num_sources: usize,
    pub strategy: String,
    pub final_svd: bool,
    pub k: String,
    pub n_fraction: Option<f64>,
    pub perturbation: String,
    pub zero_shot_acc: f64,
    pub adapted_acc: Option<f64>,
    pub learnable_params: usize,
    /// Excluded from the deterministic report files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationEntry {
    pub target: String,
    pub alpha: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub config: BTreeMap<String, String>,
    pub rows: Vec<RunRow>,
    pub calibration: Vec<CalibrationEntry>,
    pub flagged_sources: Vec<String>,
    pub warnings: Vec<String>,
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl RunReport {
    pub const CSV_HEADER: &'static str =
        "target,num_sources,strategy,final_svd,k,n_fraction,perturbation,zero_shot_acc,adapted_acc,learnable_params";

    /// Deterministic CSV (no timings).
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.target,
                r.num_sources,
                r.strategy,
                r.final_svd,
                r.k,
                opt(r.n_fraction),
                r.perturbation,
                r.zero_shot_acc,
                opt(r.adapted_acc),
                r.learnable_params
            );
        }
        s
    }

    /// Per-row wall time, in row order.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("target,num_sources,strategy,perturbation,wall_time_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r.target, r.num_sources, r.strategy, r.perturbation, r.wall_time_s);
        }
        s
    }

    pub fn calibration_csv(&self) -> String {
        let mut s = String::from("target,alpha,accuracy\n");
        for c in &self.calibration {
            let _ = writeln!(s, "{},{},{}", c.target, c.alpha, c.accuracy);
        }
        s
    }

    /// JSON document with the config echo and reference constants.
    pub fn to_json(&self) -> String {
        let reference: BTreeMap<&str, f64> = REFERENCE_FULL_SCALE_ACCURACY.into_iter().collect();
        let doc = serde_json::json!({
            "config": self.config,
            "reference_full_scale_mean_accuracy": reference,
            "flagged_sources": self.flagged_sources,
            "warnings": self.warnings,
            "rows": self.rows,
            "calibration": self.calibration,
        });
        serde_json::to_string_pretty(&doc).expect("report is plain data") + "\n"
    }
}

type SplitDelta = (BTreeMap<String, Matrix>, BTreeMap<String, Vec<f64>>);

fn mean_task_vector(sources: &[TaskVector]) -> Result<SplitDelta> {
    let first = sources
        .first()
        .ok_or_else(|| Error::EmptyInput("no sources to average".into()))?;
    let scale = 1.0 / sources.len() as f64;
    let mut matrices = BTreeMap::new();
    for (name, m) in first.matrix_layers() {
        let mut acc = Matrix::zeros(m.rows(), m.cols());
        for tv in sources {
            acc = acc.add(tv.deltas.matrix(name)?)?;
        }
        matrices.insert(name.to_string(), acc.scale(scale));
    }
    Ok((matrices, crate::params::average_nonmatrix(sources)?))
}

/// Zero-shot accuracy of `theta_pre + mean(sources)`.
pub fn mean_merge_accuracy(theta_pre: &ParamSet, sources: &[TaskVector], spec: &MlpSpec, data: &Dataset) -> Result<f64> {
    let (m, v) = mean_task_vector(sources)?;
    evaluate(spec, &apply_delta(theta_pre, &m, &v, 1.0)?, data)
}

fn subsample(data: &Dataset, fraction: f64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("train_fraction must be in (0, 1], got {fraction}")));
    }
    let n = ((fraction * data.len() as f64).ceil() as usize).clamp(1, data.len());
    let idx: Vec<usize> = (0..n).collect();
    Ok(data.subset(&idx))
}

fn perturb_sources(sources: &[TaskVector], p: Perturbation, seed: u64) -> Result<Vec<TaskVector>> {
    match p {
        Perturbation::CorruptFirst { ratio } => {
            let mut out = sources.to_vec();
            if let Some(first) = out.first_mut() {
                *first = gaussian_corrupt(first, ratio, seed)?;
            }
            Ok(out)
        }
        Perturbation::PruneAll { sparsity } => sources.iter().map(|tv| magnitude_prune(tv, sparsity)).collect(),
        Perturbation::None | Perturbation::PatchDropout { .. } => Ok(sources.to_vec()),
    }
}

/// Outcome of one merge -> adapt run for a single target and source count.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub zero_shot_acc: f64,
    pub adapted_acc: f64,
    pub state: adapt::AdaptState,
    pub learnable_params: usize,
    /// Seconds spent in split + train.
    pub adapt_time_s: f64,
    pub warnings: Vec<String>,
}

/// Merges `sources`, optionally rescales, and adapts on the target.
#[allow(clippy::too_many_arguments)]
pub fn merge_and_adapt(
    theta_pre: &ParamSet,
    spec: &MlpSpec,
    sources: &[TaskVector],
    run: &RunConfig,
    merge_seed: u64,
    rank_tol: f64,
    rescale: bool,
    adapt_cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<AdaptOutcome> {
    let merge_cfg = MergeConfig {
        strategy: run.strategy,
        k: run.k,
        rank_tol,
        skip_final_svd: run.skip_final_svd,
        seed: merge_seed,
    };
    let mut merged = merge_pipeline(sources, &merge_cfg)?;
    let mut warnings = merged.provenance.warnings.clone();
    if rescale {
        let r = spectral_rescale(&merged, theta_pre)?;
        warnings.extend(r.warnings);
        merged = r.merged;
    }
    let start = Instant::now();
    let (state, split_warnings) = split_learnable(&merged, run.n_fraction)?;
    warnings.extend(split_warnings);
    let zero_shot_acc = evaluate(spec, &assemble_weights(&state, theta_pre)?, test)?;
    let (trained, _) = adapt::train(&state, theta_pre, spec, train, None, adapt_cfg)?;
    let adapt_time_s = start.elapsed().as_secs_f64();
    let adapted_acc = evaluate(spec, &assemble_weights(&trained, theta_pre)?, test)?;
    Ok(AdaptOutcome {
        zero_shot_acc,
        adapted_acc,
        learnable_params: trained.learnable_count(),
        state: trained,
        adapt_time_s,
        warnings,
    })
}

/// For every target: baselines, then for every configuration and source
/// count (sources taken in task-index order, target excluded) one merged and
/// adapted row.
pub fn leave_one_out(
    family: &TaskFamily,
    theta_pre: &ParamSet,
    spec: &MlpSpec,
    sources: &[TaskVector],
    sweep: &SweepConfig,
) -> Result<RunReport> {
    if family.tasks.len() < 2 {
        return Err(Error::InvalidInput("leave-one-out needs at least 2 tasks".into()));
    }
    if sources.len() != family.tasks.len() {
        return Err(Error::InvalidInput(format!(
            "{} task vectors for {} tasks",
            sources.len(),
            family.tasks.len()
        )));
    }
    let max_sources = family.tasks.len() - 1;
    let counts: Vec<usize> = match &sweep.source_counts {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&n| n == 0 || n > max_sources) {
                return Err(Error::InvalidInput(format!("source count {bad} outside 1..={max_sources}")));
            }
            c.clone()
        }
        None => (1..=max_sources).collect(),
    };

    let mut report = RunReport::default();
    for (t, target) in family.tasks.iter().enumerate() {
        let others: Vec<TaskVector> = sources
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, tv)| tv.clone())
            .collect();
        let train = subsample(&target.train, sweep.train_fraction)?;

        let pre_acc = evaluate(spec, theta_pre, &target.test)?;
        report.rows.push(RunRow {
            target: target.id.clone(),
            num_sources: 0,
            strategy: BASELINE_PRETRAINED.into(),
            final_svd: false,
            k: String::new(),
            n_fraction: None,
            perturbation: Perturbation::None.to_string(),
            zero_shot_acc: pre_acc,
            adapted_acc: None,
            learnable_params: 0,
            wall_time_s: 0.0,
        });
        report.rows.push(RunRow {
            target: target.id.clone(),
            num_sources: others.len(),
            strategy: BASELINE_MEAN_MERGE.into(),
            final_svd: false,
            k: String::new(),
            n_fraction: None,
            perturbation: Perturbation::None.to_string(),
            zero_shot_acc: mean_merge_accuracy(theta_pre, &others, spec, &target.test)?,
            adapted_acc: None,
            learnable_params: 0,
            wall_time_s: 0.0,
        });

        for (ci, run) in sweep.runs.iter().enumerate() {
            let seed = derive_seed(sweep.seed, &[t as u64, ci as u64]);
            let test = match run.perturbation {
                Perturbation::PatchDropout { patch_size, fraction } => {
                    // Same mask seed for every configuration of a target.
                    patch_dropout(&target.test, patch_size, fraction, derive_seed(sweep.seed, &[t as u64, u64::MAX]))?
                }
                _ => target.test.clone(),
            };
            let perturbed = perturb_sources(&others, run.perturbation, derive_seed(seed, &[1]))?;
            for &count in &counts {
                let started = Instant::now();
                let adapt_cfg = TrainConfig {
                    seed: derive_seed(seed, &[2, count as u64]),
                    ..sweep.adapt.clone()
                };
                let outcome = merge_and_adapt(
                    theta_pre,
                    spec,
                    &perturbed[..count],
                    run,
                    derive_seed(seed, &[3, count as u64]),
                    sweep.rank_tol,
                    sweep.rescale,
                    &adapt_cfg,
                    &train,
                    &test,
                )?;
                for w in outcome.warnings {
                    report.warnings.push(format!("{} / {} sources: {w}", target.id, count));
                }
                report.rows.push(RunRow {
                    target: target.id.clone(),
                    num_sources: count,
                    strategy: run.strategy.to_string(),
                    final_svd: !run.skip_final_svd,
                    k: run.k.to_string(),
                    n_fraction: Some(run.n_fraction),
                    perturbation: run.perturbation.to_string(),
                    zero_shot_acc: outcome.zero_shot_acc,
                    adapted_acc: Some(outcome.adapted_acc),
                    learnable_params: outcome.learnable_params,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
            }
        }

        if !sweep.alphas.is_empty() {
            let merge_cfg = MergeConfig {
                rank_tol: sweep.rank_tol,
                seed: derive_seed(sweep.seed, &[t as u64, u64::MAX - 1]),
                ..MergeConfig::default()
            };
            let merged = merge_pipeline(&others, &merge_cfg)?;
            let (cal, warnings) = calibrate::calibrate(theta_pre, &merged, &sweep.alphas, true, |p: &ParamSet| {
                evaluate(spec, p, &target.test)
            })?;
            report.warnings.extend(warnings);
            report.calibration.extend(cal.rows.iter().map(|r| CalibrationEntry {
                target: target.id.clone(),
                alpha: r.alpha,
                accuracy: r.accuracy,
            }));
        }
    }
    Ok(report)
}

/// Everything a bench run needs, normally read from a key-value file.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub family: FamilyConfig,
    /// Hidden widths; input and output widths come from the family.
    pub hidden: Vec<usize>,
    pub pretrain: TrainConfig,
    pub source: TrainConfig,
    pub sweep: SweepConfig,
    /// Task used by single-target CLI commands.
    pub target: usize,
    /// Also write the pre-trained model and the source task vectors.
    pub emit_artifacts: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let family = FamilyConfig::default();
        let seed = family.seed;
        Self {
            family,
            hidden: vec![64, 32],
            pretrain: TrainConfig {
                epochs: 8,
                learning_rate: 0.05,
                batch_size: 32,
                seed: derive_seed(seed, &[100]),
            },
            source: TrainConfig {
                epochs: 6,
                learning_rate: 0.05,
                batch_size: 32,
                seed: derive_seed(seed, &[200]),
            },
            sweep: SweepConfig::default(),
            target: 0,
            emit_artifacts: false,
        }
    }
}

pub const BENCH_KEYS: &[&str] = &[
    "seed",
    "tasks",
    "d_in",
    "classes",
    "train_samples",
    "test_samples",
    "prototype_scale",
    "noise_std",
    "shared_planes",
    "shared_angle_deg",
    "shared_angle_spread",
    "task_planes",
    "task_angle_deg",
    "prototype_shift",
    "identical_tasks",
    "hidden",
    "pretrain_epochs",
    "pretrain_lr",
    "source_epochs",
    "source_lr",
    "batch_size",
    "strategies",
    "k",
    "n_fraction",
    "skip_final_svd_ablation",
    "perturbations",
    "adapt_epochs",
    "adapt_lr",
    "adapt_batch_size",
    "rank_tol",
    "rescale",
    "alphas",
    "train_fraction",
    "source_counts",
    "sweep_seed",
    "target",
    "emit_artifacts",
];

impl BenchConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(BENCH_KEYS)?;
        let d = BenchConfig::default();
        let fam = &d.family;
        let family = FamilyConfig {
            tasks: kv.get_or("tasks", fam.tasks)?,
            d_in: kv.get_or("d_in", fam.d_in)?,
            classes: kv.get_or("classes", fam.classes)?,
            train_samples: kv.get_or("train_samples", fam.train_samples)?,
            test_samples: kv.get_or("test_samples", fam.test_samples)?,
            prototype_scale: kv.get_or("prototype_scale", fam.prototype_scale)?,
            noise_std: kv.get_or("noise_std", fam.noise_std)?,
            shared_planes: kv.get_or("shared_planes", fam.shared_planes)?,
            shared_angle_deg: kv.get_or("shared_angle_deg", fam.shared_angle_deg)?,
            shared_angle_spread: kv.get_or("shared_angle_spread", fam.shared_angle_spread)?,
            task_planes: kv.get_or("task_planes", fam.task_planes)?,
            task_angle_deg: kv.get_or("task_angle_deg", fam.task_angle_deg)?,
            prototype_shift: kv.get_or("prototype_shift", fam.prototype_shift)?,
            identical_tasks: kv.get_bool_or("identical_tasks", fam.identical_tasks)?,
            seed: kv.get_or("seed", fam.seed)?,
        };
        let batch_size = kv.get_or("batch_size", d.pretrain.batch_size)?;
        let pretrain = TrainConfig {
            epochs: kv.get_or("pretrain_epochs", d.pretrain.epochs)?,
            learning_rate: kv.get_or("pretrain_lr", d.pretrain.learning_rate)?,
            batch_size,
            seed: derive_seed(family.seed, &[100]),
        };
        let source = TrainConfig {
            epochs: kv.get_or("source_epochs", d.source.epochs)?,
            learning_rate: kv.get_or("source_lr", d.source.learning_rate)?,
            batch_size,
            seed: derive_seed(family.seed, &[200]),
        };
        let adapt = TrainConfig {
            epochs: kv.get_or("adapt_epochs", d.sweep.adapt.epochs)?,
            learning_rate: kv.get_or("adapt_lr", d.sweep.adapt.learning_rate)?,
            batch_size: kv.get_or("adapt_batch_size", d.sweep.adapt.batch_size)?,
            seed: 0,
        };
        adapt.validate()?;

        let strategies: Vec<SelectionStrategy> = kv
            .get_list("strategies")?
            .unwrap_or_else(|| vec![SelectionStrategy::Top]);
        let ks: Vec<KBudget> = kv.get_list("k")?.unwrap_or_else(|| vec![KBudget::default()]);
        let n_fractions: Vec<f64> = kv.get_list("n_fraction")?.unwrap_or_else(|| vec![0.10]);
        let perturbations: Vec<Perturbation> = kv
            .get_list("perturbations")?
            .unwrap_or_else(|| vec![Perturbation::None]);
        let ablation = kv.get_bool_or("skip_final_svd_ablation", false)?;
        let mut runs = Vec::new();
        for &perturbation in &perturbations {
            for &strategy in &strategies {
                for &k in &ks {
                    for &n_fraction in &n_fractions {
                        for skip in [false, true] {
                            if skip && !ablation {
                                continue;
                            }
                            runs.push(RunConfig {
                                strategy,
                                k,
                                n_fraction,
                                skip_final_svd: skip,
                                perturbation,
                            });
                        }
                    }
                }
            }
        }
        if runs.is_empty() {
            return Err(Error::Config("sweep has no configurations".into()));
        }
        let hidden: Vec<usize> = kv.get_list("hidden")?.unwrap_or_else(|| d.hidden.clone());
        let target = kv.get_or("target", 0usize)?;
        if target >= family.tasks {
            return Err(Error::Config(format!("target {target} out of range for {} tasks", family.tasks)));
        }
        Ok(Self {
            family,
            hidden,
            pretrain,
            source,
            sweep: SweepConfig {
                runs,
                adapt,
                rank_tol: kv.get_or("rank_tol", DEFAULT_RANK_TOL)?,
                rescale: kv.get_bool_or("rescale", false)?,
                alphas: kv.get_list("alphas")?.unwrap_or_default(),
                train_fraction: kv.get_or("train_fraction", 1.0)?,
                source_counts: kv.get_list("source_counts")?,
                seed: kv.get_or("sweep_seed", d.sweep.seed)?,
            },
            target,
            emit_artifacts: kv.get_bool_or("emit_artifacts", false)?,
        })
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        let mut dims = vec![self.family.d_in];
        dims.extend(&self.hidden);
        dims.push(self.family.classes);
        MlpSpec::new(dims)
    }

    /// Flat echo of the effective configuration.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let f = &self.family;
        let list = |xs: Vec<String>| xs.join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", f.seed.to_string());
        put("tasks", f.tasks.to_string());
        put("d_in", f.d_in.to_string());
        put("classes", f.classes.to_string());
        put("train_samples", f.train_samples.to_string());
        put("test_samples", f.test_samples.to_string());
        put("prototype_scale", f.prototype_scale.to_string());
        put("noise_std", f.noise_std.to_string());
        put("shared_planes", f.shared_planes.to_string());
        put("shared_angle_deg", f.shared_angle_deg.to_string());
        put("shared_angle_spread", f.shared_angle_spread.to_string());
        put("task_planes", f.task_planes.to_string());
        put("task_angle_deg", f.task_angle_deg.to_string());
        put("prototype_shift", f.prototype_shift.to_string());
        put("identical_tasks", f.identical_tasks.to_string());
        put("hidden", list(self.hidden.iter().map(ToString::to_string).collect()));
        put("pretrain_epochs", self.pretrain.epochs.to_string());
        put("pretrain_lr", self.pretrain.learning_rate.to_string());
        put("source_epochs", self.source.epochs.to_string());
        put("source_lr", self.source.learning_rate.to_string());
        put("batch_size", self.source.batch_size.to_string());
        put("adapt_epochs", self.sweep.adapt.epochs.to_string());
        put("adapt_lr", self.sweep.adapt.learning_rate.to_string());
        put("adapt_batch_size", self.sweep.adapt.batch_size.to_string());
        put("rank_tol", self.sweep.rank_tol.to_string());
        put("rescale", self.sweep.rescale.to_string());
        put("alphas", list(self.sweep.alphas.iter().map(ToString::to_string).collect()));
        put("train_fraction", self.sweep.train_fraction.to_string());
        put(
            "source_counts",
            self.sweep
                .source_counts
                .as_ref()
                .map(|c| list(c.iter().map(ToString::to_string).collect()))
                .unwrap_or_else(|| "all".into()),
        );
        put("sweep_seed", self.sweep.seed.to_string());
        put(
            "runs",
            list(
                self.sweep
                    .runs
                    .iter()
                    .map(|r| {
                        format!(
                            "{}/k={}/n={}/final_svd={}/{}",
                            r.strategy, r.k, r.n_fraction, !r.skip_final_svd, r.perturbation
                        )
                    })
                    .collect(),
            ),
        );
        m
    }
}

/// A pre-trained model with its task family and fine-tuned sources.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub spec: MlpSpec,
    pub family: TaskFamily,
    pub theta_pre: ParamSet,
    pub sources: SourceSet,
}

/// Generates the family, pre-trains and fine-tunes every source.
pub fn prepare(cfg: &BenchConfig) -> Result<Prepared> {
    let spec = cfg.mlp_spec()?;
    let family = gen_tasks(&cfg.family)?;
    let theta_pre = pretrain(&family, &spec, &cfg.pretrain)?;
    let sources = finetune_sources(&family, &theta_pre, &spec, &cfg.source)?;
    Ok(Prepared {
        spec,
        family,
        theta_pre,
        sources,
    })
}

/// Full leave-one-out sweep.
pub fn run_bench(cfg: &BenchConfig) -> Result<(Prepared, RunReport)> {
    let prepared = prepare(cfg)?;
    let mut report = leave_one_out(
        &prepared.family,
        &prepared.theta_pre,
        &prepared.spec,
        &prepared.sources.task_vectors,
        &cfg.sweep,
    )?;
    report.config = cfg.echo();
    report.flagged_sources = prepared.sources.flagged.clone();
    Ok((prepared, report))
}

/// Writes `report.csv`, `report.json`, `timings.csv`, `calibration.csv`
/// (when an alpha grid was run) and optionally the model artifacts.
pub fn write_outputs(dir: &Path, report: &RunReport, prepared: &Prepared, emit_artifacts: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write("report.csv", report.to_csv())?;
    write("report.json", report.to_json())?;
    write("timings.csv", report.timings_csv())?;
    if !report.calibration.is_empty() {
        write("calibration.csv", report.calibration_csv())?;
    }
    if emit_artifacts {
        write_container(dir.join("theta_pre.axtc"), &ContainerObject::ParamSet(prepared.theta_pre.clone()))?;
        for tv in &prepared.sources.task_vectors {
            write_container(dir.join(format!("tv_{}.axtc", tv.source_id)), &ContainerObject::TaskVector(tv.clone()))?;
        }
    }
    Ok(())
}
