//! Deletion/retention faithfulness experiment.
//!
//! For each bundle the SDD map of the target class is upsampled to image
//! resolution and its top `fraction` of pixels forms the explanation mask; a
//! random mask with the same pixel count forms the baseline. Each mask is
//! applied in deletion and retention mode and the perturbed images are
//! scored. The confidence drop is measured on the original top class.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundle::{argmax, read_bundle, BundleError, ExplanationBundle, MANIFEST_FILE};
use crate::perturb::{apply_mask, baseline_mask, sdd_mask, Baseline, Mask, MaskSource, PerturbMode};
use crate::scorer::{check_classes, Scorer, ScorerError};
use crate::sdd::{sdd_cam, SddConfig, SddResult};
use crate::ComputeError;

pub const DEFAULT_FRACTION: f64 = 0.2;
/// Runs abort once more than this share of bundles has failed.
pub const MAX_FAILURE_RATIO: f64 = 0.10;
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.json";

const CHUNK: usize = 32;

pub const METHODOLOGY: &str = "confidence_drop_pp = 100 * (p_original - p_masked), where both \
probabilities belong to the bundle's original top class: p_original comes from the stored \
unmasked prediction and p_masked from the scorer on the masked image. The drop is an absolute \
difference in percentage points, not a relative change (0.99 -> 0.70 is a 29-point drop). \
prediction_changed is true when the masked image's argmax differs from the original top class.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no bundles found under {0}")]
    NoBundles(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bundle {bundle_id}: {source}")]
    Bundle {
        bundle_id: String,
        #[source]
        source: BundleError,
    },

    #[error("bundle {bundle_id}: {source}")]
    Compute {
        bundle_id: String,
        #[source]
        source: ComputeError,
    },

    #[error("bundle {bundle_id}: {source}")]
    Scorer {
        bundle_id: String,
        #[source]
        source: ScorerError,
    },

    #[error("cannot aggregate an empty record set")]
    EmptyRecords,

    #[error("{failed} of {total} bundles failed (limit 10%); first failure: {first}")]
    FailureThreshold {
        failed: usize,
        total: usize,
        scorer_failures: usize,
        first: String,
    },

    #[error("writing report: {0}")]
    Report(String),
}

impl EvalError {
    pub fn is_scorer_failure(&self) -> bool {
        match self {
            EvalError::Scorer { .. } => true,
            EvalError::FailureThreshold { scorer_failures, .. } => *scorer_failures > 0,
            _ => false,
        }
    }
}

/// Which class the explanation is generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSelection {
    #[default]
    Predicted,
    True,
    Class(usize),
}

impl TargetSelection {
    pub fn resolve(&self, bundle: &ExplanationBundle) -> Result<usize, ComputeError> {
        let classes = bundle.num_classes();
        let index = match *self {
            TargetSelection::Predicted => bundle.predicted_class,
            TargetSelection::True => bundle
                .true_class
                .ok_or_else(|| ComputeError::InvalidArgument("bundle has no true_class".into()))?,
            TargetSelection::Class(c) => c,
        };
        if index >= classes {
            return Err(ComputeError::ClassIndex { index, classes });
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sdd: SddConfig,
    pub fraction: f64,
    pub seed: u64,
    pub baseline: Baseline,
    pub target: TargetSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sdd: SddConfig::default(),
            fraction: DEFAULT_FRACTION,
            seed: 0,
            baseline: Baseline::Scattered,
            target: TargetSelection::Predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub bundle_id: String,
    pub mode: PerturbMode,
    pub mask_source: MaskSource,
    pub original_top_class: usize,
    pub original_confidence: f64,
    pub masked_confidence: f64,
    /// Percentage points.
    #[serde(rename = "confidence_drop_pp")]
    pub confidence_drop: f64,
    pub prediction_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: PerturbMode,
    pub mask_source: MaskSource,
    /// Percentage points.
    pub average_confidence_drop: f64,
    /// Percent of records whose prediction changed.
    pub prediction_change_percentage: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cells: Vec<CellSummary>,
}

impl EvalSummary {
    pub fn cell(&self, mode: PerturbMode, source: MaskSource) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.mask_source == source)
    }
}

/// Per-bundle seed: the global seed XOR the first eight bytes (little
/// endian) of SHA-256 of the bundle id.
pub fn bundle_seed(global_seed: u64, bundle_id: &str) -> u64 {
    let digest = Sha256::digest(bundle_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    global_seed ^ u64::from_le_bytes(head)
}

/// The four perturbed images of one bundle plus the evidence behind them.
#[derive(Debug, Clone)]
pub struct PerturbedSet {
    pub target: usize,
    pub sdd: SddResult,
    pub sdd_mask: Mask,
    pub random_mask: Mask,
    /// `(mode, source, image)` in canonical order: deletion before
    /// retention, sdd before random.
    pub images: Vec<(PerturbMode, MaskSource, RgbImage)>,
}

/// Computes the SDD map, both masks and all four perturbed images.
pub fn perturb_bundle(
    bundle_id: &str,
    bundle: &ExplanationBundle,
    cfg: &EvalConfig,
) -> Result<PerturbedSet, ComputeError> {
    let target = cfg.target.resolve(bundle)?;
    let sdd = sdd_cam(bundle, target, &cfg.sdd)?;
    let (w, h) = bundle.image_size();
    let sdd_mask = sdd_mask(&sdd, w, h, cfg.fraction)?;
    let random_mask = baseline_mask(&sdd_mask, cfg.baseline, bundle_seed(cfg.seed, bundle_id));

    let mut images = Vec::with_capacity(4);
    for mode in [PerturbMode::Deletion, PerturbMode::Retention] {
        for (source, mask) in [(MaskSource::Sdd, &sdd_mask), (MaskSource::Random, &random_mask)] {
            images.push((mode, source, apply_mask(&bundle.image, mask, mode)?));
        }
    }
    Ok(PerturbedSet {
        target,
        sdd,
        sdd_mask,
        random_mask,
        images,
    })
}

/// Builds one record per perturbed image from the scorer's outputs.
pub fn build_records(
    bundle_id: &str,
    bundle: &ExplanationBundle,
    set: &PerturbedSet,
    scores: &[Vec<f64>],
) -> Vec<EvalRecord> {
    let top = bundle.predicted_class;
    let original = bundle.probabilities[top];
    set.images
        .iter()
        .zip(scores)
        .map(|((mode, source, _), probs)| {
            let masked = probs[top];
            EvalRecord {
                bundle_id: bundle_id.to_string(),
                mode: *mode,
                mask_source: *source,
                original_top_class: top,
                original_confidence: original,
                masked_confidence: masked,
                confidence_drop: 100.0 * (original - masked),
                prediction_changed: argmax(probs) != top,
            }
        })
        .collect()
}

pub fn evaluate_bundle(
    bundle_id: &str,
    bundle: &ExplanationBundle,
    cfg: &EvalConfig,
    scorer: &mut dyn Scorer,
) -> Result<Vec<EvalRecord>, EvalError> {
    let set = perturb_bundle(bundle_id, bundle, cfg).map_err(|source| EvalError::Compute {
        bundle_id: bundle_id.to_string(),
        source,
    })?;
    score_set(bundle_id, bundle, &set, scorer)
}

fn score_set(
    bundle_id: &str,
    bundle: &ExplanationBundle,
    set: &PerturbedSet,
    scorer: &mut dyn Scorer,
) -> Result<Vec<EvalRecord>, EvalError> {
    let scorer_err = |source| EvalError::Scorer {
        bundle_id: bundle_id.to_string(),
        source,
    };
    check_classes(scorer.classes(), &bundle.class_labels).map_err(scorer_err)?;
    let images: Vec<RgbImage> = set.images.iter().map(|(_, _, img)| img.clone()).collect();
    let scores = scorer.score_batch(&images).map_err(scorer_err)?;
    Ok(build_records(bundle_id, bundle, set, &scores))
}

/// Mean drop and change percentage per (mode, source) cell. Records are
/// summed in the order given; cells appear in canonical order and only when
/// they have records.
pub fn aggregate(records: &[EvalRecord]) -> Result<EvalSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut cells = Vec::new();
    for mode in [PerturbMode::Deletion, PerturbMode::Retention] {
        for source in [MaskSource::Sdd, MaskSource::Random] {
            let (mut sum, mut changed, mut count) = (0.0, 0usize, 0usize);
            for r in records.iter().filter(|r| r.mode == mode && r.mask_source == source) {
                sum += r.confidence_drop;
                changed += usize::from(r.prediction_changed);
                count += 1;
            }
            if count > 0 {
                cells.push(CellSummary {
                    mode,
                    mask_source: source,
                    average_confidence_drop: sum / count as f64,
                    prediction_change_percentage: 100.0 * changed as f64 / count as f64,
                    count,
                });
            }
        }
    }
    Ok(EvalSummary { cells })
}

/// Bundle directories under `dir`, sorted by name. A directory that is
/// itself a bundle yields just that bundle.
pub fn list_bundles(dir: &Path) -> Result<Vec<(String, PathBuf)>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    };
    if dir.join(MANIFEST_FILE).is_file() {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "bundle".into());
        return Ok(vec![(id, dir.to_path_buf())]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.join(MANIFEST_FILE).is_file() {
            let id = path.file_name().expect("entry has a name").to_string_lossy().into_owned();
            found.push((id, path));
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFailure {
    pub bundle_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSettings {
    pub fraction: f64,
    pub seed: u64,
    pub baseline: Baseline,
    pub target: TargetSelection,
    pub competitor_count: usize,
    pub clamp_max: f64,
    pub alpha_base: f64,
    pub alpha_span: f64,
}

impl From<&EvalConfig> for RunSettings {
    fn from(cfg: &EvalConfig) -> Self {
        RunSettings {
            fraction: cfg.fraction,
            seed: cfg.seed,
            baseline: cfg.baseline,
            target: cfg.target,
            competitor_count: cfg.sdd.competitor_count,
            clamp_max: cfg.sdd.clamp_max,
            alpha_base: cfg.sdd.alpha_base,
            alpha_span: cfg.sdd.alpha_span,
        }
    }
}

/// Everything written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub methodology: &'static str,
    pub settings: RunSettings,
    pub bundles_total: usize,
    pub bundles_evaluated: usize,
    pub bundles_failed: usize,
    pub failures: Vec<BundleFailure>,
    #[serde(flatten)]
    pub summary: EvalSummary,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
}

fn prepare(
    bundle_id: &str,
    path: &Path,
    cfg: &EvalConfig,
) -> Result<(ExplanationBundle, PerturbedSet), EvalError> {
    let bundle = read_bundle(path).map_err(|source| EvalError::Bundle {
        bundle_id: bundle_id.to_string(),
        source,
    })?;
    let set = perturb_bundle(bundle_id, &bundle, cfg).map_err(|source| EvalError::Compute {
        bundle_id: bundle_id.to_string(),
        source,
    })?;
    Ok((bundle, set))
}

/// Evaluates every bundle under `bundle_dir`, writes `records.csv` and
/// `summary.json` into `report_dir`, and returns the report.
///
/// Bundles that fail are logged and excluded; the run aborts as soon as
/// failures exceed [`MAX_FAILURE_RATIO`] of all bundles.
pub fn run_experiment(
    bundle_dir: &Path,
    cfg: &EvalConfig,
    scorer: &mut dyn Scorer,
    report_dir: &Path,
) -> Result<ExperimentReport, EvalError> {
    cfg.sdd.validate().map_err(|source| EvalError::Compute {
        bundle_id: "<config>".into(),
        source,
    })?;
    let bundles = list_bundles(bundle_dir)?;
    if bundles.is_empty() {
        return Err(EvalError::NoBundles(bundle_dir.to_path_buf()));
    }
    let total = bundles.len();
    let limit = (MAX_FAILURE_RATIO * total as f64).floor() as usize;

    let mut records = Vec::with_capacity(total * 4);
    let mut failures = Vec::new();
    let mut scorer_failures = 0;

    for chunk in bundles.chunks(CHUNK) {
        let prepared: Vec<_> = chunk
            .par_iter()
            .map(|(id, path)| prepare(id, path, cfg))
            .collect();
        for ((id, _), outcome) in chunk.iter().zip(prepared) {
            let result = outcome.and_then(|(bundle, set)| score_set(id, &bundle, &set, scorer));
            match result {
                Ok(mut rs) => records.append(&mut rs),
                Err(err) => {
                    log::warn!("{err}");
                    scorer_failures += usize::from(err.is_scorer_failure());
                    failures.push(BundleFailure {
                        bundle_id: id.clone(),
                        error: err.to_string(),
                    });
                    if failures.len() > limit {
                        return Err(EvalError::FailureThreshold {
                            failed: failures.len(),
                            total,
                            scorer_failures,
                            first: failures[0].error.clone(),
                        });
                    }
                }
            }
        }
    }

    let summary = aggregate(&records)?;
    let report = ExperimentReport {
        methodology: METHODOLOGY,
        settings: RunSettings::from(cfg),
        bundles_total: total,
        bundles_evaluated: total - failures.len(),
        bundles_failed: failures.len(),
        failures,
        summary,
        records,
    };
    write_report(&report, report_dir)?;
    Ok(report)
}

pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut csv = csv::Writer::from_path(dir.join(RECORDS_FILE)).map_err(|e| EvalError::Report(e.to_string()))?;
    for r in &report.records {
        csv.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
    }
    csv.flush().map_err(|e| EvalError::Report(e.to_string()))?;

    let mut json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Report(e.to_string()))?;
    json.push('\n');
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, json).map_err(|source| EvalError::Io { path, source })
}

/// Two tables, one per mode, with the metric rows and SDD/random columns.
pub fn format_tables(summary: &EvalSummary) -> String {
    let mut out = String::new();
    for (i, (mode, title, direction)) in [
        (PerturbMode::Deletion, "Deletion method", "higher is better for deletion"),
        (PerturbMode::Retention, "Retention method", "lower is better for retention"),
    ]
    .into_iter()
    .enumerate()
    {
        let sdd = summary.cell(mode, MaskSource::Sdd);
        let random = summary.cell(mode, MaskSource::Random);
        let count = sdd.or(random).map_or(0, |c| c.count);
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{title} ({count} images)");
        let rows = [
            (
                format!("Average Confidence Drop ({direction})"),
                sdd.map(|c| c.average_confidence_drop),
                random.map(|c| c.average_confidence_drop),
            ),
            (
                format!("Prediction Change Percentage ({direction})"),
                sdd.map(|c| c.prediction_change_percentage),
                random.map(|c| c.prediction_change_percentage),
            ),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
        let _ = writeln!(out, "| {:<width$} | {:>10} | {:>10} |", "Metric", "SDD CAM", "Random CAM");
        let _ = writeln!(out, "|{}|{}|{}|", "-".repeat(width + 2), "-".repeat(12), "-".repeat(12));
        for (label, a, b) in &rows {
            let _ = writeln!(out, "| {label:<width$} | {:>10} | {:>10} |", cell(*a), cell(*b));
        }
    }
    out
}
