//! Query-set evaluation of model variants and comparison of the results.
//!
//! Reports are split in two. The main report holds everything that is a pure
//! function of the inputs and seeds, so re-runs are byte-identical. Wall-clock
//! timings live in a separate [`ReportTiming`], written next to the report as a
//! `.timing.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correspondence::{CorrespondenceProvider, Query};
use crate::geometry::{bbox_add_error, geodesic_error, loc_error, ransac_pnp, EstimatorConfig, GeometryError};
use crate::model::SfmModel;
use crate::synth::queries_to_json;

/// Label of the throughput figure; it covers matching and PnP only.
pub const FPS_LABEL: &str = "pipeline_fps(match+pnp)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("reports were computed on different query sets ({0} vs {1})")]
    MismatchedQueries(String, String),
    #[error("report {0:?} evaluated a model with no images or points")]
    EmptyVariant(String),
    #[error("unit_scale must be finite and > 0")]
    InvalidUnitScale,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Serialized pose: row-major rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&crate::pose::Pose> for PoseRecord {
    fn from(p: &crate::pose::Pose) -> Self {
        let r = p.rotation();
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: (*p.translation()).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryResult {
    pub query_index: usize,
    pub converged: bool,
    pub num_matches: usize,
    pub num_inliers: usize,
    pub ransac_iterations: usize,
    pub candidate_comparisons: u64,
    /// Present when the estimator produced a pose.
    pub estimate: Option<PoseRecord>,
    /// Errors are absent for failed queries.
    pub e_loc: Option<f64>,
    pub e_theta: Option<f64>,
    pub add_ratio: Option<f64>,
    /// Why estimation failed, if it did.
    pub failure: Option<String>,
    #[serde(skip)]
    pub timing: QueryTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTiming {
    pub match_s: f64,
    pub pnp_s: f64,
}

/// Matches `query` against `model` and estimates its pose. Failures become a
/// non-converged result; they never abort an evaluation.
pub fn estimate_query_pose(
    model: &SfmModel,
    query: &Query,
    query_index: usize,
    provider: &dyn CorrespondenceProvider,
    estimator: &EstimatorConfig,
) -> QueryResult {
    let mut result = QueryResult {
        query_index,
        converged: false,
        num_matches: 0,
        num_inliers: 0,
        ransac_iterations: 0,
        candidate_comparisons: 0,
        estimate: None,
        e_loc: None,
        e_theta: None,
        add_ratio: None,
        failure: None,
        timing: QueryTiming::default(),
    };
    let start = Instant::now();
    let matches = provider.find_matches(model, query, query_index as u64);
    result.timing.match_s = start.elapsed().as_secs_f64();
    let matches = match matches {
        Ok(m) => m,
        Err(e) => {
            result.failure = Some(format!("matching: {e}"));
            return result;
        }
    };
    result.num_matches = matches.correspondences.len();
    result.candidate_comparisons = matches.candidate_comparisons;

    let start = Instant::now();
    let estimate = ransac_pnp(&matches.correspondences, &query.view.camera, estimator);
    result.timing.pnp_s = start.elapsed().as_secs_f64();
    match estimate {
        Ok(est) if est.converged => {
            let gt = &query.pose_gt;
            result.converged = true;
            result.num_inliers = est.inlier_ids.len();
            result.ransac_iterations = est.num_iterations_used;
            result.estimate = Some(PoseRecord::from(&est.pose));
            result.e_loc = Some(loc_error(gt.translation(), est.pose.translation()));
            result.e_theta = Some(geodesic_error(gt.rotation(), est.pose.rotation()));
            result.add_ratio = Some(bbox_add_error(gt, &est.pose, model.bbox()));
        }
        Ok(est) => {
            result.ransac_iterations = est.num_iterations_used;
            result.failure = Some("no consensus".to_string());
        }
        Err(GeometryError::TooFewCorrespondences { needed, got }) => {
            result.failure = Some(format!("too few matches ({got} < {needed})"));
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    result
}

/// `e_loc ≤ n cm` and `e_theta ≤ n°`; `unit_scale` is scene units per meter.
pub fn success_n_deg_n_cm(result: &QueryResult, n_deg: f64, n_cm: f64, unit_scale: f64) -> bool {
    match (result.converged, result.e_loc, result.e_theta) {
        (true, Some(loc), Some(theta)) => loc <= n_cm / 100.0 * unit_scale && theta <= n_deg.to_radians(),
        _ => false,
    }
}

/// Mean bbox-corner displacement strictly below a tenth of the diagonal.
pub fn success_add_01d(result: &QueryResult) -> bool {
    result.converged && result.add_ratio.is_some_and(|r| r < 0.1)
}

/// Content digest of a query set, used to refuse comparisons across sets.
pub fn query_set_digest(queries: &[Query]) -> String {
    hex::encode(Sha256::digest(queries_to_json(queries).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessRates {
    #[serde(rename = "1deg_1cm")]
    pub deg1_cm1: f64,
    #[serde(rename = "3deg_3cm")]
    pub deg3_cm3: f64,
    #[serde(rename = "5deg_5cm")]
    pub deg5_cm5: f64,
    #[serde(rename = "add_0.1d")]
    pub add_01d: f64,
}

impl SuccessRates {
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            deg1_cm1: f(self.deg1_cm1, other.deg1_cm1),
            deg3_cm3: f(self.deg3_cm3, other.deg3_cm3),
            deg5_cm5: f(self.deg5_cm5, other.deg5_cm5),
            add_01d: f(self.add_01d, other.add_01d),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.zip_with(self, |a, _| f(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub variant_name: String,
    pub num_images: usize,
    pub num_points: usize,
    pub num_queries: usize,
    pub query_set_digest: String,
    pub unit_scale: f64,
    pub success: SuccessRates,
    pub num_converged: usize,
    pub total_candidate_comparisons: u64,
    pub per_query: Vec<QueryResult>,
    #[serde(skip)]
    pub timing: Option<ReportTiming>,
}

impl EvalReport {
    /// The deterministic part of the report, as written by [`save_report`].
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Wall-clock side of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTiming {
    pub variant_name: String,
    #[serde(rename = "pipeline_fps(match+pnp)")]
    pub mean_fps: f64,
    pub mean_match_ms: f64,
    pub mean_pnp_ms: f64,
    pub per_query: Vec<QueryTiming>,
}

impl ReportTiming {
    fn from_results(variant_name: &str, results: &[QueryResult]) -> Self {
        let n = results.len().max(1) as f64;
        let match_s: f64 = results.iter().map(|r| r.timing.match_s).sum();
        let pnp_s: f64 = results.iter().map(|r| r.timing.pnp_s).sum();
        let total = match_s + pnp_s;
        Self {
            variant_name: variant_name.to_string(),
            mean_fps: if total > 0.0 {
                results.len() as f64 / total
            } else {
                f64::MAX
            },
            mean_match_ms: match_s / n * 1e3,
            mean_pnp_ms: pnp_s / n * 1e3,
            per_query: results.iter().map(|r| r.timing).collect(),
        }
    }
}

/// Estimates every query's pose against `model` (queries run in parallel; each
/// one times itself) and aggregates success rates per query.
pub fn evaluate(
    variant_name: &str,
    model: &SfmModel,
    queries: &[Query],
    provider: &dyn CorrespondenceProvider,
    estimator: &EstimatorConfig,
    unit_scale: f64,
) -> Result<EvalReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if !(unit_scale > 0.0 && unit_scale.is_finite()) {
        return Err(EvalError::InvalidUnitScale);
    }
    let per_query: Vec<QueryResult> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| estimate_query_pose(model, q, i, provider, estimator))
        .collect();
    let n = per_query.len() as f64;
    let rate = |f: &dyn Fn(&QueryResult) -> bool| per_query.iter().filter(|r| f(r)).count() as f64 / n;
    let success = SuccessRates {
        deg1_cm1: rate(&|r| success_n_deg_n_cm(r, 1.0, 1.0, unit_scale)),
        deg3_cm3: rate(&|r| success_n_deg_n_cm(r, 3.0, 3.0, unit_scale)),
        deg5_cm5: rate(&|r| success_n_deg_n_cm(r, 5.0, 5.0, unit_scale)),
        add_01d: rate(&success_add_01d),
    };
    Ok(EvalReport {
        variant_name: variant_name.to_string(),
        num_images: model.num_images(),
        num_points: model.num_points(),
        num_queries: queries.len(),
        query_set_digest: query_set_digest(queries),
        unit_scale,
        success,
        num_converged: per_query.iter().filter(|r| r.converged).count(),
        total_candidate_comparisons: per_query.iter().map(|r| r.candidate_comparisons).sum(),
        timing: Some(ReportTiming::from_results(variant_name, &per_query)),
        per_query,
    })
}

/// Summary of one variant inside a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSummary {
    pub variant_name: String,
    pub num_images: usize,
    pub num_points: usize,
    pub success: SuccessRates,
    pub total_candidate_comparisons: u64,
}

impl From<&EvalReport> for VariantSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            variant_name: r.variant_name.clone(),
            num_images: r.num_images,
            num_points: r.num_points,
            success: r.success,
            total_candidate_comparisons: r.total_candidate_comparisons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBaseline {
    pub num_samples: usize,
    pub mean: SuccessRates,
    /// Sample standard deviation (0 for a single sample).
    pub std: SuccessRates,
    /// Dominating-set rate minus the random mean, per criterion.
    pub domset_minus_random: SuccessRates,
    pub samples: Vec<VariantSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub query_set_digest: String,
    pub image_reduction_factor: f64,
    pub point_reduction_factor: f64,
    /// Ratio of descriptor comparisons, a deterministic stand-in for match speedup.
    pub comparison_reduction_factor: Option<f64>,
    /// Dominating-set rate minus full-model rate, per criterion.
    pub domset_minus_full: SuccessRates,
    pub full: VariantSummary,
    pub domset: VariantSummary,
    pub random: Option<RandomBaseline>,
    #[serde(skip)]
    pub timing: Option<ComparisonTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonTiming {
    /// `domset fps / full fps`, both counting match + PnP time.
    pub speedup_factor: f64,
    /// Full-model mean match time over dominating-set mean match time.
    pub match_time_speedup: f64,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Reduction factors and success-rate deltas of the dominating-set variant
/// against the full model and against same-size random samples.
pub fn compare(full: &EvalReport, domset: &EvalReport, random: &[EvalReport]) -> Result<ComparisonReport, EvalError> {
    for r in std::iter::once(domset).chain(random) {
        if r.query_set_digest != full.query_set_digest {
            return Err(EvalError::MismatchedQueries(
                full.query_set_digest.clone(),
                r.query_set_digest.clone(),
            ));
        }
    }
    for r in [full, domset].into_iter().chain(random) {
        if r.num_images == 0 || r.num_points == 0 {
            return Err(EvalError::EmptyVariant(r.variant_name.clone()));
        }
    }
    let random_baseline = (!random.is_empty()).then(|| {
        let k = random.len() as f64;
        let zero = SuccessRates {
            deg1_cm1: 0.0,
            deg3_cm3: 0.0,
            deg5_cm5: 0.0,
            add_01d: 0.0,
        };
        let mean = random
            .iter()
            .fold(zero, |acc, r| acc.zip_with(&r.success, |a, b| a + b))
            .map(|v| v / k);
        let var = random
            .iter()
            .fold(zero, |acc, r| {
                acc.zip_with(&r.success.zip_with(&mean, |a, m| (a - m) * (a - m)), |a, b| a + b)
            })
            .map(|v| if random.len() > 1 { v / (k - 1.0) } else { 0.0 });
        RandomBaseline {
            num_samples: random.len(),
            mean,
            std: var.map(f64::sqrt),
            domset_minus_random: domset.success.zip_with(&mean, |a, b| a - b),
            samples: random.iter().map(VariantSummary::from).collect(),
        }
    });
    let comparison_reduction_factor = (domset.total_candidate_comparisons > 0 && full.total_candidate_comparisons > 0)
        .then(|| full.total_candidate_comparisons as f64 / domset.total_candidate_comparisons as f64);
    let timing = match (&full.timing, &domset.timing) {
        (Some(f), Some(d)) => Some(ComparisonTiming {
            speedup_factor: d.mean_fps / f.mean_fps,
            match_time_speedup: f.mean_match_ms / d.mean_match_ms,
        }),
        _ => None,
    };
    Ok(ComparisonReport {
        query_set_digest: full.query_set_digest.clone(),
        image_reduction_factor: full.num_images as f64 / domset.num_images as f64,
        point_reduction_factor: full.num_points as f64 / domset.num_points as f64,
        comparison_reduction_factor,
        domset_minus_full: domset.success.zip_with(&full.success, |a, b| a - b),
        full: full.into(),
        domset: domset.into(),
        random: random_baseline,
        timing,
    })
}

/// Per-query rows: `query_index,e_loc,e_theta_deg,add_ratio,match_ms,pnp_ms,converged`.
/// Failed queries leave the error columns empty.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("query_index,e_loc,e_theta_deg,add_ratio,match_ms,pnp_ms,converged\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.per_query {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.query_index,
            fmt(r.e_loc),
            fmt(r.e_theta.map(f64::to_degrees)),
            fmt(r.add_ratio),
            r.timing.match_s * 1e3,
            r.timing.pnp_s * 1e3,
            r.converged
        ));
    }
    out
}

/// Path of the timing sidecar belonging to a report file.
pub fn timing_path(report_path: &Path) -> PathBuf {
    let mut name = report_path.file_stem().unwrap_or_default().to_os_string();
    name.push(".timing.json");
    report_path.with_file_name(name)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes the report and, when it carries timings, its sidecar.
pub fn save_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    write_json(report, path)?;
    if let Some(t) = &report.timing {
        write_json(t, &timing_path(path))?;
    }
    Ok(())
}

/// Loads a report and its sidecar if one exists.
pub fn load_report(path: &Path) -> Result<EvalReport, EvalError> {
    let mut report: EvalReport = read_json(path)?;
    let sidecar = timing_path(path);
    if sidecar.exists() {
        let timing: ReportTiming = read_json(&sidecar)?;
        if timing.per_query.len() == report.per_query.len() {
            for (r, t) in report.per_query.iter_mut().zip(&timing.per_query) {
                r.timing = *t;
            }
        }
        report.timing = Some(timing);
    }
    Ok(report)
}

pub fn save_comparison(report: &ComparisonReport, path: &Path) -> Result<(), EvalError> {
    write_json(report, path)?;
    if let Some(t) = &report.timing {
        write_json(t, &timing_path(path))?;
    }
    Ok(())
}
