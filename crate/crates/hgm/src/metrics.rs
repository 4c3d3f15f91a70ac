//! Empirical clade-metaproductivity, the leakage-adjusted estimator
//! prediction, and weighted/unweighted Pearson correlation.

use serde::Serialize;

use crate::error::{HgmError, Result};
use crate::tree::{AgentId, SearchTree};

/// Maximum empirical mean over the strict descendants of `node` that have at
/// least one evaluation; None when no such descendant exists. The node
/// itself is excluded to keep the target out of its own estimators.
pub fn empirical_cmp(tree: &SearchTree, node: AgentId) -> Result<Option<f64>> {
    Ok(max_descendant(tree, node)?.map(|(_, mean)| mean))
}

/// Smallest-id strict descendant attaining the maximum empirical mean.
fn max_descendant(tree: &SearchTree, node: AgentId) -> Result<Option<(AgentId, f64)>> {
    let mut best: Option<(AgentId, f64)> = None;
    for id in tree.clade_members(node)? {
        if id == node {
            continue;
        }
        if let Some(mean) = tree.node(id)?.empirical_mean() {
            let replace = match best {
                None => true,
                Some((bid, bm)) => mean > bm || (mean == bm && id < bid),
            };
            if replace {
                best = Some((id, mean));
            }
        }
    }
    Ok(best)
}

/// Leakage-adjusted estimator prediction: clade counts minus the node's own
/// counts minus the counts of the child subtree containing the empirical
/// maximizer. Returns (prediction, weight); the weight is the number of
/// evaluations the prediction accessed. None when the target is undefined or
/// the adjusted denominator is empty.
pub fn adjusted_cmp_prediction(tree: &SearchTree, node: AgentId) -> Result<Option<(f64, f64)>> {
    let Some((maximizer, _)) = max_descendant(tree, node)? else {
        return Ok(None);
    };
    // b*: the child of `node` whose subtree contains the maximizer.
    let mut cursor = maximizer;
    let b_star = loop {
        let parent = tree.node(cursor)?.parent.expect("maximizer is a strict descendant");
        if parent == node {
            break cursor;
        }
        cursor = parent;
    };
    let n = tree.node(node)?;
    let b = tree.node(b_star)?;
    let adj_success = n.clade_success - n.n_success - b.clade_success;
    let adj_failure = n.clade_failure - n.n_failure - b.clade_failure;
    let denom = adj_success + adj_failure;
    if denom == 0 {
        return Ok(None);
    }
    Ok(Some((adj_success as f64 / denom as f64, denom as f64)))
}

/// Own-performance baseline prediction used by the comparison policies:
/// (own empirical mean, own evaluation count). None with zero evaluations.
pub fn baseline_cmp_prediction(tree: &SearchTree, node: AgentId) -> Result<Option<(f64, f64)>> {
    let n = tree.node(node)?;
    Ok(n.empirical_mean().map(|mean| (mean, n.evaluations() as f64)))
}

/// Weighted Pearson correlation; pass None for unit weights. Returns None on
/// fewer than two points or zero variance in either coordinate.
pub fn pearson(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(HgmError::Usage("pearson inputs must have equal length".into()));
    }
    if let Some(w) = weights {
        if w.len() != xs.len() {
            return Err(HgmError::Usage("weights must match data length".into()));
        }
        if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(HgmError::Param("weights must be nonnegative and finite".into()));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(HgmError::Param("weights must not all be zero".into()));
        }
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    let unit = vec![1.0; xs.len()];
    let w = weights.unwrap_or(&unit);
    let wsum: f64 = w.iter().sum();
    let mean = |vals: &[f64]| -> f64 {
        vals.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / wsum
    };
    let mx = mean(xs);
    let my = mean(ys);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += w[i] * dx * dy;
        vx += w[i] * dx * dx;
        vy += w[i] * dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx * vy).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Leakage-adjusted clade estimator.
    AdjustedCmp,
    /// Node's own benchmark performance.
    OwnMean,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationPair {
    pub node: AgentId,
    pub prediction: f64,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub estimator: EstimatorKind,
    pub pairs: Vec<CorrelationPair>,
    pub weighted_r: Option<f64>,
    pub unweighted_r: Option<f64>,
    pub n_used: usize,
}

/// Prediction-vs-target table over every node where both quantities exist,
/// with weighted and unweighted correlations.
pub fn correlation_report(tree: &SearchTree, estimator: EstimatorKind) -> Result<CorrelationReport> {
    let mut pairs = Vec::new();
    for node in tree.nodes() {
        let Some(target) = empirical_cmp(tree, node.id)? else {
            continue;
        };
        let pred = match estimator {
            EstimatorKind::AdjustedCmp => adjusted_cmp_prediction(tree, node.id)?,
            EstimatorKind::OwnMean => baseline_cmp_prediction(tree, node.id)?,
        };
        let Some((prediction, weight)) = pred else {
            continue;
        };
        pairs.push(CorrelationPair { node: node.id, prediction, target, weight });
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.prediction).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.target).collect();
    let ws: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
    let weighted_r = if ws.iter().sum::<f64>() > 0.0 {
        pearson(&xs, &ys, Some(&ws))?
    } else {
        None
    };
    let unweighted_r = pearson(&xs, &ys, None)?;
    let n_used = pairs.len();
    Ok(CorrelationReport { estimator, pairs, weighted_r, unweighted_r, n_used })
}
