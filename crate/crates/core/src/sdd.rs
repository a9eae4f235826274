//! Scaled Directed Divergence.
//!
//! For a target CAM `x_t` and competitor CAMs `x_k` drawn from a set `S`:
//!
//! ```text
//! F      = clamp(|S| * avg_k(mean|x_k|) / mean|x_t|, |S|, clamp_max)
//! D      = F * x_t - sum_k x_k
//! alpha  = alpha_base + sigma(D) / (sigma(D) + 1) * alpha_span
//! SDD    = exp(alpha * D)
//! ```
//!
//! `sigma` is the population standard deviation over all cells of `D`.

use ndarray::Array2;
use serde::{Serialize, Serializer};

use crate::bundle::ExplanationBundle;
use crate::cam::{bundle_cam, normalize_grid, top_n_classes, Cam};
use crate::ComputeError;

#[derive(Debug, Clone, PartialEq)]
pub struct SddConfig {
    /// Number of classes in the competitor set, target included.
    pub competitor_count: usize,
    pub clamp_max: f64,
    pub alpha_base: f64,
    pub alpha_span: f64,
    /// Below this mean absolute target value the target map is treated as
    /// degenerate and `F = |S|`.
    pub epsilon: f64,
    /// Explicit set membership; replaces top-n-by-probability selection.
    pub members: Option<Vec<usize>>,
}

impl Default for SddConfig {
    fn default() -> Self {
        SddConfig {
            competitor_count: 5,
            clamp_max: 50.0,
            alpha_base: 0.2,
            alpha_span: 0.2,
            epsilon: 1e-12,
            members: None,
        }
    }
}

impl SddConfig {
    pub fn validate(&self) -> Result<(), ComputeError> {
        if !(self.alpha_base.is_finite() && self.alpha_base > 0.0) {
            return Err(ComputeError::InvalidArgument(format!(
                "alpha_base must be positive, got {}",
                self.alpha_base
            )));
        }
        if !(self.alpha_span.is_finite() && self.alpha_span >= 0.0) {
            return Err(ComputeError::InvalidArgument(format!(
                "alpha_span must be non-negative, got {}",
                self.alpha_span
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(ComputeError::InvalidArgument("epsilon must be non-negative".into()));
        }
        if self.members.is_none() && self.competitor_count < 2 {
            return Err(ComputeError::InvalidArgument(format!(
                "competitor count must be at least 2, got {}",
                self.competitor_count
            )));
        }
        Ok(())
    }
}

fn grid_rows<S: Serializer>(grid: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = grid.outer_iter().map(|r| r.to_vec()).collect();
    rows.serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SddResult {
    pub target_class: usize,
    /// Set members in selection order; contains `target_class`.
    pub members: Vec<usize>,
    pub set_size: usize,
    pub scaling_factor: f64,
    pub alpha: f64,
    #[serde(serialize_with = "grid_rows")]
    pub divergence: Array2<f64>,
    /// `exp(alpha * divergence)`; may overflow to infinity for very large
    /// divergences. Use [`SddResult::normalized_map`] for display and masks.
    #[serde(serialize_with = "grid_rows")]
    pub sdd_map: Array2<f64>,
}

impl SddResult {
    /// Min-max normalized SDD map, computed as `exp(alpha * (D - max D))` so
    /// that it stays finite when `sdd_map` itself overflows. Min-max
    /// normalization is invariant to the positive factor this removes.
    pub fn normalized_map(&self) -> Array2<f64> {
        let max = self.divergence.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.divergence.mapv(|d| (self.alpha * (d - max)).exp());
        normalize_grid(&shifted)
    }
}

fn check_resolution(target: &Cam, others: &[Cam]) -> Result<(), ComputeError> {
    if others.is_empty() {
        return Err(ComputeError::InvalidArgument(
            "competitor set has no classes besides the target".into(),
        ));
    }
    let res = target.resolution();
    if let Some(bad) = others.iter().find(|c| c.resolution() != res) {
        return Err(ComputeError::Shape(format!(
            "CAM for class {} is {:?}, target is {:?}",
            bad.class_id,
            bad.resolution(),
            res
        )));
    }
    Ok(())
}

/// Magnitude-balancing factor for the target CAM, clamped to
/// `[|S|, clamp_max]` with `|S| = 1 + others.len()`.
pub fn scaling_factor(target: &Cam, others: &[Cam], cfg: &SddConfig) -> Result<f64, ComputeError> {
    check_resolution(target, others)?;
    let set_size = (others.len() + 1) as f64;
    if cfg.clamp_max < set_size {
        return Err(ComputeError::InvalidArgument(format!(
            "clamp_max {} is below the set size {set_size}",
            cfg.clamp_max
        )));
    }
    let target_mag = target.mean_abs();
    if target_mag < cfg.epsilon {
        return Ok(set_size);
    }
    let others_mag = others.iter().map(Cam::mean_abs).sum::<f64>() / others.len() as f64;
    let raw = set_size * others_mag / target_mag;
    Ok(raw.clamp(set_size, cfg.clamp_max))
}

pub fn divergence(target: &Cam, others: &[Cam], factor: f64) -> Result<Array2<f64>, ComputeError> {
    check_resolution(target, others)?;
    let mut d = target.grid.mapv(|v| v * factor);
    for other in others {
        d -= &other.grid;
    }
    Ok(d)
}

/// Population standard deviation over all cells.
pub fn population_std(grid: &Array2<f64>) -> f64 {
    let n = grid.len() as f64;
    let mean = grid.sum() / n;
    (grid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn alpha_param(divergence: &Array2<f64>, cfg: &SddConfig) -> f64 {
    let sigma = population_std(divergence);
    cfg.alpha_base + sigma / (sigma + 1.0) * cfg.alpha_span
}

/// Competitor set for `target`: the explicit member list when configured,
/// otherwise the top `competitor_count` classes by probability (capped at
/// the number of classes). When the target is absent it replaces the last
/// member.
pub fn select_members(
    probabilities: &[f64],
    target: usize,
    cfg: &SddConfig,
) -> Result<Vec<usize>, ComputeError> {
    let classes = probabilities.len();
    if classes < 2 {
        return Err(ComputeError::InvalidArgument(format!(
            "SDD needs at least 2 classes, bundle has {classes}"
        )));
    }
    if target >= classes {
        return Err(ComputeError::ClassIndex { index: target, classes });
    }
    let mut members = match &cfg.members {
        Some(list) => {
            let mut seen = Vec::with_capacity(list.len());
            for &c in list {
                if c >= classes {
                    return Err(ComputeError::ClassIndex { index: c, classes });
                }
                if !seen.contains(&c) {
                    seen.push(c);
                }
            }
            if seen.len() < 2 {
                return Err(ComputeError::InvalidArgument(
                    "explicit member list needs at least 2 distinct classes".into(),
                ));
            }
            seen
        }
        None => top_n_classes(probabilities, cfg.competitor_count.min(classes))?,
    };
    if !members.contains(&target) {
        *members.last_mut().expect("at least two members") = target;
    }
    Ok(members)
}

/// Runs the full SDD pipeline on already computed CAMs.
pub fn sdd_from_cams(target: &Cam, others: &[Cam], cfg: &SddConfig) -> Result<SddResult, ComputeError> {
    cfg.validate()?;
    let factor = scaling_factor(target, others, cfg)?;
    let divergence = divergence(target, others, factor)?;
    let alpha = alpha_param(&divergence, cfg);
    let sdd_map = divergence.mapv(|d| (alpha * d).exp());
    let mut members = vec![target.class_id];
    members.extend(others.iter().map(|c| c.class_id));
    Ok(SddResult {
        target_class: target.class_id,
        set_size: members.len(),
        members,
        scaling_factor: factor,
        alpha,
        divergence,
        sdd_map,
    })
}

/// SDD map for `target_class`, with competitors chosen from the bundle's
/// probabilities.
pub fn sdd_cam(
    bundle: &ExplanationBundle,
    target_class: usize,
    cfg: &SddConfig,
) -> Result<SddResult, ComputeError> {
    cfg.validate()?;
    let members = select_members(&bundle.probabilities, target_class, cfg)?;
    let target = bundle_cam(bundle, target_class)?;
    let others = members
        .iter()
        .filter(|&&c| c != target_class)
        .map(|&c| bundle_cam(bundle, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut result = sdd_from_cams(&target, &others, cfg)?;
    result.members = members;
    Ok(result)
}
