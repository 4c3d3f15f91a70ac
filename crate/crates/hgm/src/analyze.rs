//! Estimator diagnostics over finished runs: per-seed and pooled correlation
//! between each estimator's prediction and the empirical
//! clade-metaproductivity target, in the shape used to study the
//! metaproductivity-performance mismatch.

use serde::Serialize;

use crate::error::Result;
use crate::metrics::{correlation_report, pearson, CorrelationPair, CorrelationReport, EstimatorKind};
use crate::runtime::{reconstruct_tree, EventLog, RunConfig};
use crate::sweep::par_map;
use crate::tree::SearchTree;

#[derive(Debug, Clone, Serialize)]
pub struct SeedCorrelation {
    pub seed: u64,
    pub adjusted: CorrelationReport,
    pub baseline: CorrelationReport,
}

/// Both estimators against the shared empirical target on one tree.
pub fn analyze_tree(tree: &SearchTree) -> Result<(CorrelationReport, CorrelationReport)> {
    Ok((
        correlation_report(tree, EstimatorKind::AdjustedCmp)?,
        correlation_report(tree, EstimatorKind::OwnMean)?,
    ))
}

/// Analysis entry point for a persisted run log.
pub fn analyze_log(log: &EventLog) -> Result<(CorrelationReport, CorrelationReport)> {
    analyze_tree(&reconstruct_tree(log)?)
}

/// Correlation over pairs pooled across runs.
pub fn pooled_report(estimator: EstimatorKind, reports: &[&CorrelationReport]) -> Result<CorrelationReport> {
    let pairs: Vec<CorrelationPair> =
        reports.iter().flat_map(|r| r.pairs.iter().cloned()).collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.prediction).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.target).collect();
    let ws: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
    let (weighted_r, unweighted_r) = if pairs.len() >= 2 && ws.iter().sum::<f64>() > 0.0 {
        (pearson(&xs, &ys, Some(&ws))?, pearson(&xs, &ys, None)?)
    } else {
        (None, None)
    };
    let n_used = pairs.len();
    Ok(CorrelationReport { estimator, pairs, weighted_r, unweighted_r, n_used })
}

#[derive(Debug, Clone, Serialize)]
pub struct MismatchSummary {
    pub per_seed: Vec<SeedCorrelation>,
    /// Seeds where both weighted correlations were defined.
    pub seeds_used: usize,
    pub mean_adjusted_weighted_r: Option<f64>,
    pub mean_baseline_weighted_r: Option<f64>,
}

impl MismatchSummary {
    pub fn advantage(&self) -> Option<f64> {
        Some(self.mean_adjusted_weighted_r? - self.mean_baseline_weighted_r?)
    }
}

/// Run the base configuration over many seeds and average the per-seed
/// weighted correlations of both estimators.
pub fn mismatch_analysis(base: &RunConfig, seeds: &[u64]) -> Result<MismatchSummary> {
    let results = par_map(seeds, |&seed| -> Result<SeedCorrelation> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let out = crate::runtime::run(&cfg)?;
        let (adjusted, baseline) = analyze_tree(&out.tree)?;
        Ok(SeedCorrelation { seed, adjusted, baseline })
    });
    let per_seed: Vec<SeedCorrelation> = results.into_iter().collect::<Result<_>>()?;
    summarize_seeds(per_seed)
}

fn summarize_seeds(per_seed: Vec<SeedCorrelation>) -> Result<MismatchSummary> {
    let mut adj_sum = 0.0;
    let mut base_sum = 0.0;
    let mut used = 0usize;
    for s in &per_seed {
        if let (Some(a), Some(b)) = (s.adjusted.weighted_r, s.baseline.weighted_r) {
            adj_sum += a;
            base_sum += b;
            used += 1;
        }
    }
    let (mean_a, mean_b) = if used > 0 {
        (Some(adj_sum / used as f64), Some(base_sum / used as f64))
    } else {
        (None, None)
    };
    Ok(MismatchSummary {
        per_seed,
        seeds_used: used,
        mean_adjusted_weighted_r: mean_a,
        mean_baseline_weighted_r: mean_b,
    })
}

pub const CORRELATION_CSV_HEADER: &str =
    "scope,estimator,n_used,weighted_r,unweighted_r";

fn estimator_name(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::AdjustedCmp => "adjusted_cmp",
        EstimatorKind::OwnMean => "own_mean",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Correlation CSV: one row per (run, estimator) plus pooled rows. Columns:
/// scope (run label or "pooled"), estimator, n_used, weighted_r,
/// unweighted_r; undefined correlations are empty cells.
pub fn correlation_csv(rows: &[(String, &CorrelationReport)]) -> String {
    let mut out = String::from(CORRELATION_CSV_HEADER);
    out.push('\n');
    for (scope, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            scope,
            estimator_name(r.estimator),
            r.n_used,
            opt(r.weighted_r),
            opt(r.unweighted_r)
        ));
    }
    out
}

/// Human-readable fixed-width table with the same content as the CSV.
pub fn correlation_table(rows: &[(String, &CorrelationReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:<14} {:>7} {:>12} {:>12}\n",
        "scope", "estimator", "n_used", "weighted_r", "unweighted_r"
    ));
    for (scope, r) in rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<20} {:<14} {:>7} {:>12} {:>12}\n",
            scope,
            estimator_name(r.estimator),
            r.n_used,
            fmt(r.weighted_r),
            fmt(r.unweighted_r)
        ));
    }
    out
}
