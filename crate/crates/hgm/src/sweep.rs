//! Multi-seed replication: per-seed summaries, paired policy comparisons,
//! and bootstrap confidence intervals. Seeds run data-parallel when the
//! `parallel` feature is enabled and sequentially otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::runtime::{run, PolicyKind, RunConfig, RunOutput};
use crate::tree::AgentId;

/// Whether sweeps fan out across threads in this build.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Data-parallel map with a sequential fallback.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// One row of a sweep: the per-run outcome plus ground truth for the chosen
/// agent. Wall time is kept out of the CSV so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub policy_kind: PolicyKind,
    pub seed: u64,
    pub best: AgentId,
    pub best_true_utility: f64,
    pub best_empirical_mean: f64,
    pub tree_size: usize,
    pub evaluations_used: u64,
    pub starved: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

pub fn summarize(cfg: &RunConfig, out: &RunOutput, wall_time_s: f64) -> RunSummary {
    let node = out.tree.node(out.best).expect("selected agent exists");
    RunSummary {
        run_id: format!("{}-{}", cfg.policy_kind, cfg.seed),
        policy_kind: cfg.policy_kind,
        seed: cfg.seed,
        best: out.best,
        best_true_utility: out.latents[out.best.index()].u,
        best_empirical_mean: node.empirical_mean().unwrap_or(0.0),
        tree_size: out.tree.len(),
        evaluations_used: out.log.eval_commits(),
        starved: out.starved,
        wall_time_s,
    }
}

/// Run one seed of the base configuration.
pub fn run_seed(base: &RunConfig, seed: u64) -> Result<RunSummary> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let started = std::time::Instant::now();
    let out = run(&cfg)?;
    Ok(summarize(&cfg, &out, started.elapsed().as_secs_f64()))
}

/// Multi-seed sweep; per-seed failures are recorded, not fatal.
pub fn sweep(base: &RunConfig, seeds: &[u64]) -> Vec<std::result::Result<RunSummary, String>> {
    par_map(seeds, |&seed| run_seed(base, seed).map_err(|e| format!("seed {seed}: {e}")))
}

/// Percentile bootstrap confidence interval on the mean.
pub fn bootstrap_mean_ci(
    samples: &[f64],
    resamples: u32,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(HgmError::Param("bootstrap needs at least one sample".into()));
    }
    if resamples == 0 {
        return Err(HgmError::Param("resamples must be at least 1".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(HgmError::Param(format!("confidence must lie in (0,1), got {confidence}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut means = Vec::with_capacity(resamples as usize);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += samples[rng.random_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let tail = (1.0 - confidence) / 2.0;
    let lo_idx = ((resamples as f64 * tail) as usize).min(means.len() - 1);
    let hi_idx = ((resamples as f64 * (1.0 - tail)) as usize).min(means.len() - 1);
    Ok((means[lo_idx], means[hi_idx]))
}

/// Per-policy aggregate over sweep rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub policy_kind: PolicyKind,
    pub n: usize,
    pub mean_true_utility: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn aggregate(rows: &[RunSummary], resamples: u32, boot_seed: u64) -> Result<Vec<Aggregate>> {
    let mut by_policy: Vec<(PolicyKind, Vec<f64>)> = Vec::new();
    for row in rows {
        match by_policy.iter_mut().find(|(p, _)| *p == row.policy_kind) {
            Some((_, v)) => v.push(row.best_true_utility),
            None => by_policy.push((row.policy_kind, vec![row.best_true_utility])),
        }
    }
    by_policy
        .into_iter()
        .map(|(policy_kind, utils)| {
            let mean = utils.iter().sum::<f64>() / utils.len() as f64;
            let (ci_lo, ci_hi) = bootstrap_mean_ci(&utils, resamples, 0.95, boot_seed)?;
            Ok(Aggregate { policy_kind, n: utils.len(), mean_true_utility: mean, ci_lo, ci_hi })
        })
        .collect()
}

/// Same seeds under two policies, compared on the per-seed difference of the
/// chosen agent's true utility (a - b).
#[derive(Debug, Clone, Serialize)]
pub struct PairedComparison {
    pub policy_a: PolicyKind,
    pub policy_b: PolicyKind,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_diff: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl PairedComparison {
    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }
}

pub fn paired_comparison(
    base_a: &RunConfig,
    base_b: &RunConfig,
    seeds: &[u64],
    resamples: u32,
    boot_seed: u64,
) -> Result<PairedComparison> {
    if seeds.is_empty() {
        return Err(HgmError::Param("paired comparison needs at least one seed".into()));
    }
    let results = par_map(seeds, |&seed| -> Result<(f64, f64)> {
        let a = run_seed(base_a, seed)?;
        let b = run_seed(base_b, seed)?;
        Ok((a.best_true_utility, b.best_true_utility))
    });
    let mut utils_a = Vec::with_capacity(seeds.len());
    let mut utils_b = Vec::with_capacity(seeds.len());
    for r in results {
        let (ua, ub) = r?;
        utils_a.push(ua);
        utils_b.push(ub);
    }
    let diffs: Vec<f64> = utils_a.iter().zip(&utils_b).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    let mean_a = utils_a.iter().sum::<f64>() / n as f64;
    let mean_b = utils_b.iter().sum::<f64>() / n as f64;
    let (ci_lo, ci_hi) = bootstrap_mean_ci(&diffs, resamples, 0.95, boot_seed)?;
    Ok(PairedComparison {
        policy_a: base_a.policy_kind,
        policy_b: base_b.policy_kind,
        n,
        mean_a,
        mean_b,
        mean_diff: mean_a - mean_b,
        ci_lo,
        ci_hi,
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "row_type,run_id,policy,seed,best,best_true_utility,best_empirical_mean,tree_size,evaluations_used,starved,n,ci_lo,ci_hi";

/// Sweep CSV: one row per run (errors included) plus one aggregate row per
/// policy. Documented columns; aggregate rows leave the per-run cells empty.
pub fn sweep_csv(
    rows: &[std::result::Result<RunSummary, String>],
    aggregates: &[Aggregate],
) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        match row {
            Ok(s) => {
                out.push_str(&format!(
                    "run,{},{},{},{},{},{},{},{},{},,,\n",
                    s.run_id,
                    s.policy_kind,
                    s.seed,
                    s.best.0,
                    s.best_true_utility,
                    s.best_empirical_mean,
                    s.tree_size,
                    s.evaluations_used,
                    s.starved
                ));
            }
            Err(msg) => {
                out.push_str(&format!("error,{},,,,,,,,,,,\n", msg.replace(',', ";")));
            }
        }
    }
    for a in aggregates {
        out.push_str(&format!(
            "aggregate,,{},,,{},,,,,{},{},{}\n",
            a.policy_kind, a.mean_true_utility, a.n, a.ci_lo, a.ci_hi
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepRow {
    Run(RunSummary),
    Error(String),
    Aggregate(Aggregate),
}

/// Parse a sweep CSV back into rows; `sweep_csv` of the result is identity.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SWEEP_CSV_HEADER => {}
        _ => return Err(HgmError::Parse { line: 1, msg: "bad or missing sweep CSV header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| HgmError::Parse { line: i + 1, msg: msg.into() };
        if fields.len() != 13 {
            return Err(bad("expected 13 columns"));
        }
        match fields[0] {
            "run" => rows.push(SweepRow::Run(RunSummary {
                run_id: fields[1].to_string(),
                policy_kind: fields[2].parse()?,
                seed: fields[3].parse().map_err(|_| bad("seed"))?,
                best: AgentId(fields[4].parse().map_err(|_| bad("best"))?),
                best_true_utility: fields[5].parse().map_err(|_| bad("best_true_utility"))?,
                best_empirical_mean: fields[6].parse().map_err(|_| bad("best_empirical_mean"))?,
                tree_size: fields[7].parse().map_err(|_| bad("tree_size"))?,
                evaluations_used: fields[8].parse().map_err(|_| bad("evaluations_used"))?,
                starved: fields[9].parse().map_err(|_| bad("starved"))?,
                wall_time_s: 0.0,
            })),
            "error" => rows.push(SweepRow::Error(fields[1].to_string())),
            "aggregate" => rows.push(SweepRow::Aggregate(Aggregate {
                policy_kind: fields[2].parse()?,
                n: fields[10].parse().map_err(|_| bad("n"))?,
                mean_true_utility: fields[5].parse().map_err(|_| bad("mean_true_utility"))?,
                ci_lo: fields[11].parse().map_err(|_| bad("ci_lo"))?,
                ci_hi: fields[12].parse().map_err(|_| bad("ci_hi"))?,
            })),
            other => return Err(bad(&format!("unknown row type '{other}'"))),
        }
    }
    Ok(rows)
}

/// Re-emit parsed rows; used by the round-trip contract.
pub fn emit_rows_csv(rows: &[SweepRow]) -> String {
    let runs: Vec<std::result::Result<RunSummary, String>> = rows
        .iter()
        .filter_map(|r| match r {
            SweepRow::Run(s) => Some(Ok(s.clone())),
            SweepRow::Error(m) => Some(Err(m.clone())),
            SweepRow::Aggregate(_) => None,
        })
        .collect();
    let aggs: Vec<Aggregate> = rows
        .iter()
        .filter_map(|r| match r {
            SweepRow::Aggregate(a) => Some(a.clone()),
            _ => None,
        })
        .collect();
    sweep_csv(&runs, &aggs)
}
