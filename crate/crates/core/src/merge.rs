//! Stage one of the pipeline: decompose every source task matrix into
//! rank-one components, pool them per layer, pick a transfer basis, sum it
//! into a merged delta and re-orthogonalize that delta with a final SVD.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rank_one_sum, svd, Matrix, RankOne};
use crate::params::{average_nonmatrix, TaskVector};

/// Source id attached to components produced by the averaging strategies.
pub const AVERAGED_SOURCE_ID: &str = "averaged";

/// Rank tolerance used when callers do not pick one.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Default per-layer budget: 10% of `min(rows, cols)`.
pub const DEFAULT_K_FRACTION: f64 = 0.10;

/// One rank-one triplet `u * sigma * v^T` with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub u: Vec<f64>,
    pub sigma: f64,
    pub v: Vec<f64>,
    pub source_id: String,
    /// Position of the source in the input list.
    pub source_index: usize,
    /// Position within the source's own SVD (0 = largest).
    pub comp_index: usize,
}

impl Component {
    fn as_rank_one(&self) -> RankOne<'_> {
        RankOne::new(&self.u, self.sigma, &self.v)
    }
}

/// Larger sigma first; ties by `(source_index, comp_index)` ascending.
fn by_sigma_desc(a: &Component, b: &Component) -> Ordering {
    b.sigma
        .total_cmp(&a.sigma)
        .then(a.source_index.cmp(&b.source_index))
        .then(a.comp_index.cmp(&b.comp_index))
}

/// Smaller sigma first; ties by `(source_index, comp_index)` ascending.
fn by_sigma_asc(a: &Component, b: &Component) -> Ordering {
    a.sigma
        .total_cmp(&b.sigma)
        .then(a.source_index.cmp(&b.source_index))
        .then(a.comp_index.cmp(&b.comp_index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerComponents {
    pub rows: usize,
    pub cols: usize,
    pub components: Vec<Component>,
}

impl LayerComponents {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn sum(&self) -> Matrix {
        let terms: Vec<RankOne<'_>> = self.components.iter().map(Component::as_rank_one).collect();
        rank_one_sum(self.rows, self.cols, &terms).expect("components match their layer shape")
    }
}

/// All SVD components of all sources, per matrix layer.
#[derive(Clone, Debug)]
pub struct ComponentPool {
    pub source_ids: Vec<String>,
    /// Tolerance the source SVDs were truncated with; reused by the
    /// averaging strategies for their intermediate SVD.
    pub rank_tol: f64,
    pub layers: BTreeMap<String, LayerComponents>,
}

/// The per-layer selection, each list sorted by sigma descending.
#[derive(Clone, Debug)]
pub struct TransferBasis {
    pub layers: BTreeMap<String, LayerComponents>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionStrategy {
    Top,
    Bottom,
    Arbitrary,
    AverageTop,
    AverageBottom,
    EqualTopContribution,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 6] = [
        SelectionStrategy::Top,
        SelectionStrategy::Bottom,
        SelectionStrategy::Arbitrary,
        SelectionStrategy::AverageTop,
        SelectionStrategy::AverageBottom,
        SelectionStrategy::EqualTopContribution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Top => "top",
            SelectionStrategy::Bottom => "bottom",
            SelectionStrategy::Arbitrary => "arbitrary",
            SelectionStrategy::AverageTop => "average_top",
            SelectionStrategy::AverageBottom => "average_bottom",
            SelectionStrategy::EqualTopContribution => "equal_top_contribution",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        SelectionStrategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::InvalidStrategy(s.to_string()))
    }
}

/// Per-layer component budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KBudget {
    Count(usize),
    /// Fraction of `min(rows, cols)`, rounded, at least one.
    Fraction(f64),
}

impl Default for KBudget {
    fn default() -> Self {
        KBudget::Fraction(DEFAULT_K_FRACTION)
    }
}

impl KBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KBudget::Count(0) => Err(Error::InvalidInput("K must be at least 1".into())),
            KBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::InvalidInput(format!(
                "K fraction must be in (0, 1], got {f}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, rows: usize, cols: usize) -> usize {
        match *self {
            KBudget::Count(k) => k,
            KBudget::Fraction(f) => ((f * rows.min(cols) as f64).round() as usize).max(1),
        }
    }
}

impl fmt::Display for KBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KBudget::Count(k) => write!(f, "{k}"),
            KBudget::Fraction(x) => write!(f, "{x:?}"),
        }
    }
}

impl FromStr for KBudget {
    type Err = Error;

    /// Integers are absolute counts; anything with a decimal point or
    /// exponent is a fraction (`"1.0"` keeps every component).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let budget = if s.contains(['.', 'e', 'E']) {
            KBudget::Fraction(
                s.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad K fraction `{s}`")))?,
            )
        } else {
            KBudget::Count(
                s.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad K count `{s}`")))?,
            )
        };
        budget.validate()?;
        Ok(budget)
    }
}

/// SVD-decomposes every matrix layer of every source and pools the
/// components per layer.
pub fn decompose_sources(task_vectors: &[TaskVector], rank_tol: f64) -> Result<ComponentPool> {
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no source task vectors".into()))?;
    for tv in &task_vectors[1..] {
        tv.deltas.check_same_schema(&first.deltas)?;
    }

    let mut layers = BTreeMap::new();
    for (name, proto) in first.matrix_layers() {
        let (rows, cols) = proto.shape();
        let mut components = Vec::new();
        for (source_index, tv) in task_vectors.iter().enumerate() {
            let factors = svd(tv.deltas.matrix(name)?, rank_tol)?;
            for (comp_index, (u, sigma, v)) in factors.triplets().into_iter().enumerate() {
                components.push(Component {
                    u,
                    sigma,
                    v,
                    source_id: tv.source_id.clone(),
                    source_index,
                    comp_index,
                });
            }
        }
        layers.insert(
            name.to_string(),
            LayerComponents {
                rows,
                cols,
                components,
            },
        );
    }
    Ok(ComponentPool {
        source_ids: task_vectors.iter().map(|tv| tv.source_id.clone()).collect(),
        rank_tol,
        layers,
    })
}

/// Picks the transfer basis for every layer of the pool.
///
/// `Arbitrary` draws from a ChaCha8 generator seeded with `seed`, using the
/// layer's lexicographic ordinal as the stream id, so each layer gets an
/// independent reproducible sample.
pub fn select(pool: &ComponentPool, strategy: SelectionStrategy, k: KBudget, seed: u64) -> Result<TransferBasis> {
    k.validate()?;
    let mut warnings = Vec::new();
    let mut layers = BTreeMap::new();
    for (ordinal, (name, layer)) in pool.layers.iter().enumerate() {
        let budget = k.resolve(layer.rows, layer.cols);
        let mut chosen = match strategy {
            SelectionStrategy::Top => sorted_prefix(&layer.components, budget, by_sigma_desc),
            SelectionStrategy::Bottom => sorted_prefix(&layer.components, budget, by_sigma_asc),
            SelectionStrategy::Arbitrary => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ordinal as u64);
                let n = layer.components.len();
                let picks = rand::seq::index::sample(&mut rng, n, budget.min(n));
                picks.into_iter().map(|i| layer.components[i].clone()).collect()
            }
            SelectionStrategy::EqualTopContribution => {
                equal_contribution(layer, pool.source_ids.len(), budget)
            }
            SelectionStrategy::AverageTop => averaged(layer, pool, budget, true)?,
            SelectionStrategy::AverageBottom => averaged(layer, pool, budget, false)?,
        };
        if chosen.len() < budget {
            warnings.push(format!(
                "layer `{name}`: {strategy} selected {} of K = {budget} components",
                chosen.len()
            ));
        }
        chosen.sort_by(by_sigma_desc);
        layers.insert(
            name.clone(),
            LayerComponents {
                rows: layer.rows,
                cols: layer.cols,
                components: chosen,
            },
        );
    }
    Ok(TransferBasis { layers, warnings })
}

fn sorted_prefix(
    components: &[Component],
    k: usize,
    order: fn(&Component, &Component) -> Ordering,
) -> Vec<Component> {
    let mut all: Vec<&Component> = components.iter().collect();
    all.sort_by(|a, b| order(a, b));
    all.into_iter().take(k).cloned().collect()
}

/// Top `k / S` of each of the `S` sources; the remainder goes one each to
/// the lowest source indices.
fn equal_contribution(layer: &LayerComponents, sources: usize, k: usize) -> Vec<Component> {
    if sources == 0 {
        return Vec::new();
    }
    let (share, extra) = (k / sources, k % sources);
    (0..sources)
        .flat_map(|src| {
            let quota = share + usize::from(src < extra);
            let mut own: Vec<&Component> = layer
                .components
                .iter()
                .filter(|c| c.source_index == src)
                .collect();
            own.sort_by(|a, b| by_sigma_desc(a, b));
            own.into_iter().take(quota).cloned().collect::<Vec<_>>()
        })
        .collect()
}

/// Truncate each source to its own top (or bottom) `k`, average the
/// low-rank reconstructions, SVD the average and keep its top (or bottom) `k`.
fn averaged(layer: &LayerComponents, pool: &ComponentPool, k: usize, top: bool) -> Result<Vec<Component>> {
    let sources = pool.source_ids.len();
    let order = if top { by_sigma_desc } else { by_sigma_asc };
    let mut sum = Matrix::zeros(layer.rows, layer.cols);
    for src in 0..sources {
        let own: Vec<Component> = layer
            .components
            .iter()
            .filter(|c| c.source_index == src)
            .cloned()
            .collect();
        let kept = sorted_prefix(&own, k, order);
        let terms: Vec<RankOne<'_>> = kept.iter().map(Component::as_rank_one).collect();
        sum = sum.add(&rank_one_sum(layer.rows, layer.cols, &terms)?)?;
    }
    let mean = sum.scale(1.0 / sources.max(1) as f64);
    let factors = svd(&mean, pool.rank_tol)?;
    let components: Vec<Component> = factors
        .triplets()
        .into_iter()
        .enumerate()
        .map(|(comp_index, (u, sigma, v))| Component {
            u,
            sigma,
            v,
            source_id: AVERAGED_SOURCE_ID.to_string(),
            source_index: sources,
            comp_index,
        })
        .collect();
    Ok(sorted_prefix(&components, k, order))
}

/// Sums each layer's basis into the merged delta `sum_k u_k sigma_k v_k^T`.
pub fn synthesize(basis: &TransferBasis) -> BTreeMap<String, Matrix> {
    basis
        .layers
        .iter()
        .map(|(name, layer)| (name.clone(), layer.sum()))
        .collect()
}

/// Factored form of one merged layer, `U diag(s) V^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedLayer {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
    /// False when the factors are the raw selected components rather than
    /// the output of a final SVD.
    pub orthogonal: bool,
}

impl MergedLayer {
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    pub fn width(&self) -> usize {
        self.s.len()
    }

    /// Reassembles the dense delta.
    pub fn delta(&self) -> Matrix {
        assemble(&self.u, &self.s, &self.v)
    }
}

/// `U diag(s) V^T` where `s` may be shorter than the factor width.
pub(crate) fn assemble(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
    let mut us = Matrix::zeros(u.rows(), s.len());
    for r in 0..u.rows() {
        for (j, &sj) in s.iter().enumerate() {
            us[(r, j)] = u[(r, j)] * sj;
        }
    }
    let mut vs = Matrix::zeros(v.rows(), s.len());
    for r in 0..v.rows() {
        for j in 0..s.len() {
            vs[(r, j)] = v[(r, j)];
        }
    }
    us.matmul_t(&vs).expect("factor widths agree")
}

/// Re-expresses each merged layer in an orthonormal basis via SVD, keeping
/// at most as many values as the layer's basis had components.
///
/// With `skip_final_svd` the raw, generally non-orthogonal selected factors
/// are kept instead.
pub fn reorthogonalize(
    basis: &TransferBasis,
    delta_m: &BTreeMap<String, Matrix>,
    skip_final_svd: bool,
    rank_tol: f64,
) -> Result<BTreeMap<String, MergedLayer>> {
    let mut out = BTreeMap::new();
    for (name, layer) in &basis.layers {
        let merged = if skip_final_svd {
            let us: Vec<&[f64]> = layer.components.iter().map(|c| c.u.as_slice()).collect();
            let vs: Vec<&[f64]> = layer.components.iter().map(|c| c.v.as_slice()).collect();
            MergedLayer {
                u: Matrix::from_columns(layer.rows, &us)?,
                s: layer.components.iter().map(|c| c.sigma).collect(),
                v: Matrix::from_columns(layer.cols, &vs)?,
                orthogonal: false,
            }
        } else {
            let delta = delta_m
                .get(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("no merged delta for layer `{name}`")))?;
            let f = svd(delta, rank_tol)?;
            let width = f.rank().min(layer.len());
            let keep = |m: &Matrix| Matrix::from_fn(m.rows(), width, |r, c| m[(r, c)]);
            MergedLayer {
                u: keep(&f.u),
                s: f.s[..width].to_vec(),
                v: keep(&f.v),
                orthogonal: true,
            }
        };
        out.insert(name.clone(), merged);
    }
    Ok(out)
}

/// How a merged delta was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub k: String,
    /// Resolved per-layer K.
    pub layer_k: BTreeMap<String, usize>,
    pub source_ids: Vec<String>,
    pub final_svd: bool,
    pub seed: u64,
    pub rank_tol: f64,
    pub warnings: Vec<String>,
}

/// Stage-one output: factored matrix deltas plus averaged vector deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedDelta {
    pub layers: BTreeMap<String, MergedLayer>,
    pub vector_deltas: BTreeMap<String, Vec<f64>>,
    pub provenance: Provenance,
}

impl MergedDelta {
    pub fn matrix_deltas(&self) -> BTreeMap<String, Matrix> {
        self.layers
            .iter()
            .map(|(k, l)| (k.clone(), l.delta()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeConfig {
    pub strategy: SelectionStrategy,
    pub k: KBudget,
    pub rank_tol: f64,
    pub skip_final_svd: bool,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::Top,
            k: KBudget::default(),
            rank_tol: DEFAULT_RANK_TOL,
            skip_final_svd: false,
            seed: 0,
        }
    }
}

/// decompose -> select -> synthesize -> re-orthogonalize, plus the
/// elementwise mean of the vector-kind layers.
pub fn merge_pipeline(task_vectors: &[TaskVector], cfg: &MergeConfig) -> Result<MergedDelta> {
    cfg.k.validate()?;
    let pool = decompose_sources(task_vectors, cfg.rank_tol)?;
    let basis = select(&pool, cfg.strategy, cfg.k, cfg.seed)?;
    let delta_m = synthesize(&basis);
    let layers = reorthogonalize(&basis, &delta_m, cfg.skip_final_svd, cfg.rank_tol)?;
    let vector_deltas = average_nonmatrix(task_vectors)?;
    let provenance = Provenance {
        strategy: cfg.strategy.to_string(),
        k: cfg.k.to_string(),
        layer_k: pool
            .layers
            .iter()
            .map(|(name, l)| (name.clone(), cfg.k.resolve(l.rows, l.cols)))
            .collect(),
        source_ids: pool.source_ids,
        final_svd: !cfg.skip_final_svd,
        seed: cfg.seed,
        rank_tol: cfg.rank_tol,
        warnings: basis.warnings,
    };
    Ok(MergedDelta {
        layers,
        vector_deltas,
        provenance,
    })
}
