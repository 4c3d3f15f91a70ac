//! Operator surface: configure, run, sweep, analyze, and verify.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 verification failure,
//! 3 capacity exceeded.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hgm::analyze::{
    analyze_log, correlation_csv, correlation_table, pooled_report,
};
use hgm::env::TaskDifficulty;
use hgm::error::HgmError;
use hgm::metrics::EstimatorKind;
use hgm::oracle::{random_mdp, verify_theorem, MicroMdp};
use hgm::policy::SchedulerKind;
use hgm::runtime::{replay, run, EventLog, PolicyKind, RunConfig};
use hgm::sweep::{aggregate, paired_comparison, sweep, sweep_csv, RunSummary};
use hgm::Result;

#[derive(Parser)]
#[command(name = "hgm", version, about = "Clade-guided agent tree search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flat overrides, repeatable: --set key=value (e.g. --set budget=800,
    /// --set env.sigma_u=0.1; unprefixed keys are resolved by name).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    workers: Option<u32>,
    /// hgm | greedy | dgm_like
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write event log, tree snapshot, and summary.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Replicate over a seed range and emit aggregate CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Half-open seed range, e.g. 0..200
        #[arg(long, default_value = "0..8")]
        seeds: String,
        /// Comma-separated policies to sweep; two policies also get a paired
        /// bootstrap comparison.
        #[arg(long, default_value = "hgm")]
        policies: String,
        #[arg(long, default_value_t = 2000)]
        bootstrap_resamples: u32,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Correlation analysis of one or more run logs.
    Analyze {
        /// Event-log files (JSONL) from completed runs.
        logs: Vec<PathBuf>,
        /// Optional CSV output path (table always goes to stdout).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify the value-equivalence theorem on micro decision processes.
    OracleCheck {
        /// TOML file with [[mdp]] instances.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Number of random instances when no file is given.
        #[arg(long, default_value_t = 100)]
        random: u32,
        #[arg(long, default_value_t = 4)]
        max_types: usize,
        #[arg(long, default_value_t = 4)]
        max_budget: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-derive every decision in a log and report divergences.
    Replay { log: PathBuf },
}

fn exit_code_for(err: &HgmError) -> ExitCode {
    match err {
        HgmError::Verification(_) => ExitCode::from(2),
        HgmError::Capacity(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { cfg, out_dir } => cmd_run(&cfg, &out_dir),
        Command::Sweep { cfg, seeds, policies, bootstrap_resamples, out_dir } => {
            cmd_sweep(&cfg, &seeds, &policies, bootstrap_resamples, &out_dir)
        }
        Command::Analyze { logs, csv } => cmd_analyze(&logs, csv.as_deref()),
        Command::OracleCheck { instances, random, max_types, max_budget, seed } => {
            cmd_oracle_check(instances.as_deref(), random, max_types, max_budget, seed)
        }
        Command::Replay { log } => cmd_replay(&log),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| HgmError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &args.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| HgmError::Usage(format!("override '{kv}' is not key=value")))?;
        apply_override(&mut cfg, key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(budget) = args.budget {
        cfg.budget = budget;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(policy) = &args.policy {
        cfg.policy_kind = policy.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let bad = |field: &str, value: &str| {
        HgmError::Usage(format!("invalid value '{value}' for key '{field}'"))
    };
    macro_rules! parse_to {
        ($slot:expr, $field:expr, $value:expr) => {
            $slot = $value.parse().map_err(|_| bad($field, $value))?
        };
    }
    // Accept both bare keys and section-prefixed keys.
    let key = key
        .trim_start_matches("policy.")
        .trim_start_matches("env.");
    match key {
        "seed" => parse_to!(cfg.seed, key, value),
        "budget" => parse_to!(cfg.budget, key, value),
        "workers" => parse_to!(cfg.workers, key, value),
        "init_expansions" => parse_to!(cfg.init_expansions, key, value),
        "policy_kind" => cfg.policy_kind = value.parse()?,
        "alpha_widening" => parse_to!(cfg.policy.alpha_widening, key, value),
        "epsilon_percentile" => parse_to!(cfg.policy.epsilon_percentile, key, value),
        "scheduler" => {
            cfg.policy.scheduler = if value == "b_over_b" {
                SchedulerKind::BOverB
            } else {
                SchedulerKind::Constant(value.parse().map_err(|_| bad(key, value))?)
            }
        }
        "dgm_stage_size" => parse_to!(cfg.policy.dgm_stage_size, key, value),
        "dgm_stage_threshold" => parse_to!(cfg.policy.dgm_stage_threshold, key, value),
        "task_count" => parse_to!(cfg.env.task_count, key, value),
        "root_u" => parse_to!(cfg.env.root_u, key, value),
        "root_m" => parse_to!(cfg.env.root_m, key, value),
        "drift_gain" => parse_to!(cfg.env.drift_gain, key, value),
        "sigma_u" => parse_to!(cfg.env.sigma_u, key, value),
        "sigma_m" => parse_to!(cfg.env.sigma_m, key, value),
        "u_m_coupling" => parse_to!(cfg.env.u_m_coupling, key, value),
        "latency_ms_const" => parse_to!(cfg.env.latency_ms_const, key, value),
        "latency_ms_exp" => parse_to!(cfg.env.latency_ms_exp, key, value),
        "difficulty_file" => {
            cfg.env.task_difficulty = TaskDifficulty::Offsets(read_difficulty_file(Path::new(value))?)
        }
        other => return Err(HgmError::Usage(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// One real offset per line; blank lines and #-comments ignored.
fn read_difficulty_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut offs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        offs.push(line.parse().map_err(|_| HgmError::Parse {
            line: i + 1,
            msg: format!("not a real number: '{line}'"),
        })?);
    }
    Ok(offs)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    config: &'a RunConfig,
    tree: &'a hgm::tree::SearchTree,
    latents: &'a [hgm::env::LatentAgent],
}

#[derive(Serialize)]
struct Metadata {
    finished_unix_ms: u128,
    wall_time_s: f64,
}

fn cmd_run(args: &ConfigArgs, out_dir: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let out = run(&cfg)?;
    let wall = started.elapsed().as_secs_f64();
    let summary = hgm::sweep::summarize(&cfg, &out, wall);

    out.log.write_to(fs::File::create(out_dir.join("events.jsonl"))?)?;
    let snapshot = Snapshot { config: &cfg, tree: &out.tree, latents: &out.latents };
    fs::write(out_dir.join("snapshot.json"), serde_json::to_string_pretty(&snapshot)?)?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    // Timestamps live apart so result files are byte-stable across reruns.
    let meta = Metadata {
        finished_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        wall_time_s: wall,
    };
    fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    println!(
        "run {}: best agent {} (true utility {:.4}, empirical {:.4}), tree size {}, {} evaluations",
        summary.run_id,
        summary.best,
        summary.best_true_utility,
        summary.best_empirical_mean,
        summary.tree_size,
        summary.evaluations_used
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_seed_range(text: &str) -> Result<Vec<u64>> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| HgmError::Usage(format!("seed range '{text}' must look like 0..200")))?;
    let lo: u64 = a.parse().map_err(|_| HgmError::Usage(format!("bad range start '{a}'")))?;
    let hi: u64 = b.parse().map_err(|_| HgmError::Usage(format!("bad range end '{b}'")))?;
    if hi <= lo {
        return Err(HgmError::Usage(format!("empty seed range '{text}'")));
    }
    Ok((lo..hi).collect())
}

fn cmd_sweep(
    args: &ConfigArgs,
    seeds: &str,
    policies: &str,
    resamples: u32,
    out_dir: &Path,
) -> Result<ExitCode> {
    let base = load_config(args)?;
    let seeds = parse_seed_range(seeds)?;
    let policies: Vec<PolicyKind> =
        policies.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
    if policies.is_empty() {
        return Err(HgmError::Usage("at least one policy required".into()));
    }
    fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();

    let mut all_rows = Vec::new();
    let mut ok_rows: Vec<RunSummary> = Vec::new();
    for &policy in &policies {
        let mut cfg = base.clone();
        cfg.policy_kind = policy;
        let rows = sweep(&cfg, &seeds);
        for r in &rows {
            if let Ok(s) = r {
                ok_rows.push(s.clone());
            }
        }
        all_rows.extend(rows);
    }
    let aggs = aggregate(&ok_rows, resamples, base.seed)?;
    let csv = sweep_csv(&all_rows, &aggs);
    fs::write(out_dir.join("sweep.csv"), &csv)?;

    for a in &aggs {
        println!(
            "{}: n={} mean true utility {:.4} (95% CI {:.4}..{:.4})",
            a.policy_kind, a.n, a.mean_true_utility, a.ci_lo, a.ci_hi
        );
    }
    if policies.len() == 2 {
        let mut cfg_a = base.clone();
        cfg_a.policy_kind = policies[0];
        let mut cfg_b = base.clone();
        cfg_b.policy_kind = policies[1];
        let cmp = paired_comparison(&cfg_a, &cfg_b, &seeds, resamples, base.seed)?;
        println!(
            "paired {} - {}: mean diff {:.4} (95% CI {:.4}..{:.4}){}",
            cmp.policy_a,
            cmp.policy_b,
            cmp.mean_diff,
            cmp.ci_lo,
            cmp.ci_hi,
            if cmp.ci_excludes_zero() { ", excludes 0" } else { "" }
        );
        fs::write(out_dir.join("paired.json"), serde_json::to_string_pretty(&cmp)?)?;
    }
    let meta = Metadata {
        finished_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let failures = all_rows.iter().filter(|r| r.is_err()).count();
    if failures > 0 {
        eprintln!("{failures} seed(s) failed; see sweep.csv error rows");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(logs: &[PathBuf], csv_out: Option<&Path>) -> Result<ExitCode> {
    if logs.is_empty() {
        return Err(HgmError::Usage("analyze needs at least one log file".into()));
    }
    let mut reports = Vec::new();
    for path in logs {
        let log = EventLog::read_from(BufReader::new(fs::File::open(path)?))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let (adjusted, baseline) = analyze_log(&log)?;
        if adjusted.n_used == 0 {
            eprintln!("note: {label} has no usable prediction/target pairs");
        }
        reports.push((label, adjusted, baseline));
    }

    let mut rows: Vec<(String, &hgm::metrics::CorrelationReport)> = Vec::new();
    for (label, adj, base) in &reports {
        rows.push((label.clone(), adj));
        rows.push((label.clone(), base));
    }
    let pooled_adj = pooled_report(
        EstimatorKind::AdjustedCmp,
        &reports.iter().map(|(_, a, _)| a).collect::<Vec<_>>(),
    )?;
    let pooled_base = pooled_report(
        EstimatorKind::OwnMean,
        &reports.iter().map(|(_, _, b)| b).collect::<Vec<_>>(),
    )?;
    rows.push(("pooled".into(), &pooled_adj));
    rows.push(("pooled".into(), &pooled_base));

    print!("{}", correlation_table(&rows));
    let csv = correlation_csv(&rows);
    match csv_out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct InstanceFile {
    #[serde(rename = "mdp")]
    mdps: Vec<MicroMdp>,
}

fn cmd_oracle_check(
    instances: Option<&Path>,
    random: u32,
    max_types: usize,
    max_budget: u32,
    seed: u64,
) -> Result<ExitCode> {
    let mdps: Vec<MicroMdp> = match instances {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let file: InstanceFile = toml::from_str(&text)
                .map_err(|e| HgmError::Usage(format!("{}: {e}", path.display())))?;
            file.mdps
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..random).map(|_| random_mdp(&mut rng, max_types, max_budget)).collect()
        }
    };
    if mdps.is_empty() {
        return Err(HgmError::Usage("no instances to check".into()));
    }

    let mut failed = 0usize;
    let mut skipped = 0usize;
    let mut max_gap = 0.0f64;
    for (i, mdp) in mdps.iter().enumerate() {
        match verify_theorem(mdp) {
            Ok(report) => {
                max_gap = max_gap.max(report.max_abs_gap);
                if !report.passed() {
                    failed += 1;
                    for v in report.violations.iter().take(3) {
                        eprintln!("instance {i}: {}", v.detail);
                    }
                }
            }
            Err(HgmError::Capacity(msg)) => {
                skipped += 1;
                eprintln!("instance {i}: skipped, {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    println!(
        "checked {} instance(s): {} failed, {} skipped, max |cmp - q| = {:.3e}",
        mdps.len(),
        failed,
        skipped,
        max_gap
    );
    if failed > 0 {
        return Err(HgmError::Verification(format!("{failed} instance(s) violate the equivalence")));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(log_path: &Path) -> Result<ExitCode> {
    let log = EventLog::read_from(BufReader::new(fs::File::open(log_path)?))?;
    let report = replay(&log)?;
    println!(
        "replayed {} events, {} evaluation commits",
        report.events_checked, report.eval_commits
    );
    if let Some((seq, msg)) = report.first_divergence() {
        return Err(HgmError::Verification(format!(
            "{} divergence(s); first at seq {seq}: {msg}",
            report.divergences.len()
        )));
    }
    println!("no divergences");
    Ok(ExitCode::SUCCESS)
}
