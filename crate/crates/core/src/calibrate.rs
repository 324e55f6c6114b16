//! Data-free spectral rescaling of a merged delta and zero-shot evaluation
//! along the interpolation path `theta_pre + alpha * delta`.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::merge::MergedDelta;
use crate::params::{apply_delta, ParamSet};

/// Relative floor below which pre-trained singular values count as zero.
pub const PRETRAINED_RANK_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Rescaled {
    pub merged: MergedDelta,
    pub gammas: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Smallest singular value of `w` above `1e-10 * s_max`.
pub fn smallest_significant_singular_value(name: &str, params: &ParamSet) -> Result<f64> {
    let w = params.matrix(name)?;
    let f = svd(w, PRETRAINED_RANK_FLOOR)?;
    f.s.last()
        .copied()
        .ok_or_else(|| Error::DegenerateLayer(name.to_string()))
}

/// Multiplies every merged singular value of a layer by
/// `gamma = sigma_min(theta_pre layer) / sigma_max(merged layer)`.
///
/// Singular vectors are left untouched. Layers whose merged delta is zero
/// are skipped with a warning.
pub fn spectral_rescale(merged: &MergedDelta, theta_pre: &ParamSet) -> Result<Rescaled> {
    let mut out = merged.clone();
    let mut gammas = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, layer) in out.layers.iter_mut() {
        let pre = theta_pre.matrix(name)?;
        if pre.shape() != layer.shape() {
            return Err(Error::SchemaMismatch(format!(
                "layer `{name}`: merged {:?} vs pre-trained {:?}",
                layer.shape(),
                pre.shape()
            )));
        }
        let sigma_max = if layer.orthogonal {
            layer.s.iter().copied().fold(0.0, f64::max)
        } else {
            svd(&layer.delta(), 0.0)?.s.first().copied().unwrap_or(0.0)
        };
        if sigma_max <= 0.0 {
            warnings.push(format!("layer `{name}`: merged delta is zero, not rescaled"));
            continue;
        }
        let sigma_min = smallest_significant_singular_value(name, theta_pre)?;
        let gamma = sigma_min / sigma_max;
        layer.s.iter_mut().for_each(|s| *s *= gamma);
        gammas.insert(name.clone(), gamma);
    }
    Ok(Rescaled {
        merged: out,
        gammas,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationRow {
    pub alpha: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationReport {
    /// Per-layer rescale factor; empty when no rescaling was applied.
    pub gammas: BTreeMap<String, f64>,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    /// `alpha,accuracy` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,accuracy\n");
        for row in &self.rows {
            let _ = writeln!(s, "{},{}", row.alpha, row.accuracy);
        }
        s
    }

    /// `layer,gamma` sidecar.
    pub fn gammas_csv(&self) -> String {
        let mut s = String::from("layer,gamma\n");
        for (name, g) in &self.gammas {
            let _ = writeln!(s, "{name},{g}");
        }
        s
    }

    /// Row with the highest accuracy; the smallest alpha wins ties.
    pub fn best(&self) -> Option<CalibrationRow> {
        self.rows
            .iter()
            .copied()
            .fold(None, |best: Option<CalibrationRow>, r| match best {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
    }
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("no alpha values".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidInput(format!("alpha {a} outside [0, 1]")));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("alphas must be strictly increasing".into()));
    }
    Ok(())
}

/// Evaluates `theta_pre + alpha * merged` (matrix and vector deltas alike)
/// for every alpha.
pub fn interpolate_eval<F, E>(
    theta_pre: &ParamSet,
    merged: &MergedDelta,
    alphas: &[f64],
    evaluator: F,
) -> Result<CalibrationReport>
where
    F: Fn(&ParamSet) -> std::result::Result<f64, E>,
    E: Display,
{
    check_alphas(alphas)?;
    let matrix_deltas = merged.matrix_deltas();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = apply_delta(theta_pre, &matrix_deltas, &merged.vector_deltas, alpha)?;
        let accuracy = evaluator(&params).map_err(|e| Error::Evaluation {
            alpha,
            detail: e.to_string(),
        })?;
        rows.push(CalibrationRow { alpha, accuracy });
    }
    Ok(CalibrationReport {
        gammas: BTreeMap::new(),
        rows,
    })
}

/// Optional spectral rescale followed by the interpolation sweep.
pub fn calibrate<F, E>(
    theta_pre: &ParamSet,
    merged: &MergedDelta,
    alphas: &[f64],
    rescale: bool,
    evaluator: F,
) -> Result<(CalibrationReport, Vec<String>)>
where
    F: Fn(&ParamSet) -> std::result::Result<f64, E>,
    E: Display,
{
    if !rescale {
        return Ok((interpolate_eval(theta_pre, merged, alphas, evaluator)?, Vec::new()));
    }
    let rescaled = spectral_rescale(merged, theta_pre)?;
    let mut report = interpolate_eval(theta_pre, &rescaled.merged, alphas, evaluator)?;
    report.gammas = rescaled.gammas;
    Ok((report, rescaled.warnings))
}

impl Display for CalibrationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "alpha={} accuracy={:.4}", self.alpha, self.accuracy)
    }
}
