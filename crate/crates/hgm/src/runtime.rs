//! Budgeted execution engine: sequential and asynchronous drivers that
//! interleave decide -> dispatch -> commit, with forced root initialization,
//! in-flight accounting, an append-only event log, and replay verification.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::Tau;
use crate::env::{AgentHandle, EnvConfig, Executor, LatentAgent, SyntheticExecutor};
use crate::error::{HgmError, Result};
use crate::policy::{
    best_belief_agent, best_by_empirical_mean, decide_action_kind, dgm_like_policy_step,
    greedy_policy_step, select_evaluation_agent, select_expansion_parent, select_task, Action,
    ActionKind, BudgetState, PolicyConfig, SchedulerKind,
};
use crate::tree::{AgentId, SearchTree, TaskId};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Hgm,
    Greedy,
    DgmLike,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyKind::Hgm => write!(f, "hgm"),
            PolicyKind::Greedy => write!(f, "greedy"),
            PolicyKind::DgmLike => write!(f, "dgm_like"),
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = HgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hgm" => Ok(PolicyKind::Hgm),
            "greedy" => Ok(PolicyKind::Greedy),
            "dgm_like" | "dgm-like" | "dgm" => Ok(PolicyKind::DgmLike),
            other => Err(HgmError::Usage(format!("unknown policy kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: u64,
    pub workers: u32,
    /// Forced expansions of the root before the decision loop; applied to
    /// the adaptive policy only (the comparison policies define their own
    /// opening moves).
    pub init_expansions: u32,
    pub policy_kind: PolicyKind,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            budget: 800,
            workers: 1,
            init_expansions: 5,
            policy_kind: PolicyKind::Hgm,
            policy: PolicyConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(HgmError::Param("budget must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(HgmError::Param("workers must be at least 1".into()));
        }
        self.policy.validate()?;
        self.env.validate()
    }

    fn effective_init_expansions(&self) -> u32 {
        match self.policy_kind {
            PolicyKind::Hgm => self.init_expansions,
            _ => 0,
        }
    }
}

// Externally tagged on purpose: internally tagged / flattened enums round-trip
// floats through serde's lossy content buffer, which costs the last ulp of tau
// and breaks byte-identical replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEventKind {
    Decision {
        decision_seq: u64,
        action_seq: u64,
        action: ActionKind,
        /// True when the evaluation pool was starved and the decision fell
        /// back to expansion.
        starved: bool,
        tau: f64,
        widening_n: u64,
        effective_size: u64,
        tree_size: u64,
        committed: u64,
        inflight_evals: u64,
        inflight_expansions: u64,
        total_success: u64,
        total_failure: u64,
    },
    ExpandStart {
        action_seq: u64,
        parent: AgentId,
        init: bool,
    },
    ExpandCommit {
        action_seq: u64,
        parent: AgentId,
        child: AgentId,
    },
    EvalStart {
        action_seq: u64,
        agent: AgentId,
        task: TaskId,
    },
    EvalCommit {
        action_seq: u64,
        agent: AgentId,
        task: TaskId,
        success: bool,
    },
    ActionFailed {
        action_seq: u64,
    },
    FinalSelection {
        best: AgentId,
        total_success: u64,
        total_failure: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    /// Number of committed actions when the event was emitted.
    pub logical_time: u64,
    pub kind: RunEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: u32,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<RunEvent>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<EventLog> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| HgmError::Parse { line: 1, msg: "empty log".into() })??;
        let header: LogHeader = serde_json::from_str(&header_line)
            .map_err(|e| HgmError::Parse { line: 1, msg: e.to_string() })?;
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: RunEvent = serde_json::from_str(&line)
                .map_err(|e| HgmError::Parse { line: i + 2, msg: e.to_string() })?;
            events.push(ev);
        }
        Ok(EventLog { header, events })
    }

    pub fn eval_commits(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, RunEventKind::EvalCommit { .. }))
            .count() as u64
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tree: SearchTree,
    pub best: AgentId,
    pub log: EventLog,
    /// Ground-truth latents indexed by AgentId (synthetic backend only).
    pub latents: Vec<LatentAgent>,
    pub starved: bool,
}

// RNG keying: every decision and every action owns a ChaCha stream derived
// from the run seed and its sequence number, so action outcomes are
// schedule-independent and replay can regenerate every choice.
fn decision_rng(seed: u64, decision_seq: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(decision_seq * 2 + 1);
    rng
}

fn action_rng(seed: u64, action_seq: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(action_seq * 2);
    rng
}

/// What the coordinator hands to an executor slot.
#[derive(Debug, Clone, Copy)]
enum Dispatch {
    Expand { action_seq: u64, parent: AgentId, handle: AgentHandle },
    Eval { action_seq: u64, agent: AgentId, handle: AgentHandle, task: TaskId },
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Expanded { action_seq: u64, parent: AgentId, child_handle: AgentHandle },
    Evaluated { action_seq: u64, agent: AgentId, task: TaskId, success: bool },
    Failed { action_seq: u64 },
}

struct Engine<'e, E: Executor> {
    cfg: RunConfig,
    exec: &'e E,
    tree: SearchTree,
    budget: BudgetState,
    handles: Vec<AgentHandle>,
    events: Vec<RunEvent>,
    seq: u64,
    decision_seq: u64,
    action_seq: u64,
    committed_actions: u64,
    starved: bool,
    log_events: bool,
}

impl<'e, E: Executor> Engine<'e, E> {
    fn new(cfg: &RunConfig, exec: &'e E) -> Result<Self> {
        cfg.validate()?;
        Ok(Engine {
            cfg: cfg.clone(),
            exec,
            tree: SearchTree::new(cfg.env.task_count)?,
            budget: BudgetState::new(cfg.budget),
            handles: vec![AgentHandle(0)],
            events: Vec::new(),
            seq: 0,
            decision_seq: 0,
            action_seq: 0,
            committed_actions: 0,
            starved: false,
            log_events: true,
        })
    }

    /// Continuation from an existing state, for rollout estimation. Agent i
    /// must correspond to executor handle i.
    fn from_state(cfg: &RunConfig, exec: &'e E, tree: SearchTree, committed: u64) -> Self {
        let handles = (0..tree.len() as u32).map(AgentHandle).collect();
        let mut budget = BudgetState::new(cfg.budget);
        budget.committed_evals = committed;
        Engine {
            cfg: cfg.clone(),
            exec,
            tree,
            budget,
            handles,
            events: Vec::new(),
            seq: 0,
            decision_seq: 0,
            action_seq: 0,
            committed_actions: 0,
            starved: false,
            log_events: false,
        }
    }

    fn log(&mut self, kind: RunEventKind) {
        if !self.log_events {
            return;
        }
        self.events.push(RunEvent {
            seq: self.seq,
            logical_time: self.committed_actions,
            kind,
        });
        self.seq += 1;
    }

    fn current_tau(&self) -> Result<Tau> {
        match self.cfg.policy.scheduler {
            SchedulerKind::BOverB => {
                crate::bandit::scheduler_tau(self.budget.total_budget, self.budget.remaining_committed())
            }
            SchedulerKind::Constant(t) => Tau::new(t),
        }
    }

    /// One decision under the configured policy; reserves resources, logs
    /// the Decision and Start events, and returns the dispatch.
    fn decide(&mut self) -> Result<Option<Dispatch>> {
        if !self.budget.can_dispatch_eval() {
            // All remaining budget is committed or in flight; nothing left
            // to decide.
            return Ok(None);
        }
        let tau = self.current_tau()?;
        let mut rng = decision_rng(self.cfg.seed, self.decision_seq);
        let effective_size = self.tree.len() as u64 + self.budget.inflight_expansions;

        let mut starved = false;
        let planned = match self.cfg.policy_kind {
            PolicyKind::Hgm => {
                let kind = decide_action_kind(&self.budget, effective_size, &self.cfg.policy);
                match kind {
                    ActionKind::Evaluate => match select_evaluation_agent(&self.tree, tau, &mut rng) {
                        Ok(agent) => {
                            let task = select_task(self.tree.node(agent)?, &mut rng)?;
                            Action::Evaluate { agent, task }
                        }
                        Err(_) => {
                            starved = true;
                            let parent = select_expansion_parent(&self.tree, tau, &mut rng)?;
                            Action::Expand { parent }
                        }
                    },
                    ActionKind::Expand => {
                        let parent = select_expansion_parent(&self.tree, tau, &mut rng)?;
                        Action::Expand { parent }
                    }
                }
            }
            PolicyKind::Greedy => greedy_policy_step(&self.tree, &mut rng)?,
            PolicyKind::DgmLike => dgm_like_policy_step(&self.tree, &self.cfg.policy, &mut rng)?,
        };

        let action_seq = self.action_seq;
        self.action_seq += 1;
        let action_kind = match planned {
            Action::Expand { .. } => ActionKind::Expand,
            Action::Evaluate { .. } => ActionKind::Evaluate,
        };
        self.log(RunEventKind::Decision {
            decision_seq: self.decision_seq,
            action_seq,
            action: action_kind,
            starved,
            tau: tau.value(),
            widening_n: self.budget.widening_n(),
            effective_size,
            tree_size: self.tree.len() as u64,
            committed: self.budget.committed_evals,
            inflight_evals: self.budget.inflight_evals,
            inflight_expansions: self.budget.inflight_expansions,
            total_success: self.tree.total_success(),
            total_failure: self.tree.total_failure(),
        });
        self.decision_seq += 1;
        if starved {
            self.starved = true;
        }

        let dispatch = match planned {
            Action::Expand { parent } => {
                self.tree.note_pending_expansion(parent)?;
                self.budget.inflight_expansions += 1;
                self.log(RunEventKind::ExpandStart { action_seq, parent, init: false });
                Dispatch::Expand {
                    action_seq,
                    parent,
                    handle: self.handles[parent.index()],
                }
            }
            Action::Evaluate { agent, task } => {
                self.tree.begin_evaluation(agent, task)?;
                self.budget.inflight_evals += 1;
                self.log(RunEventKind::EvalStart { action_seq, agent, task });
                Dispatch::Eval { action_seq, agent, handle: self.handles[agent.index()], task }
            }
        };
        Ok(Some(dispatch))
    }

    /// Forced root expansion dispatched outside the decision loop.
    fn dispatch_init_expansion(&mut self) -> Result<Dispatch> {
        let action_seq = self.action_seq;
        self.action_seq += 1;
        self.tree.note_pending_expansion(AgentId::ROOT)?;
        self.budget.inflight_expansions += 1;
        self.log(RunEventKind::ExpandStart { action_seq, parent: AgentId::ROOT, init: true });
        Ok(Dispatch::Expand {
            action_seq,
            parent: AgentId::ROOT,
            handle: self.handles[AgentId::ROOT.index()],
        })
    }

    fn execute_inline(&mut self, dispatch: Dispatch) -> Outcome {
        run_dispatch(self.exec, self.cfg.seed, dispatch)
    }

    fn commit(&mut self, outcome: Outcome) -> Result<()> {
        match outcome {
            Outcome::Expanded { action_seq, parent, child_handle } => {
                let child = self.tree.add_child(parent)?;
                debug_assert_eq!(child.index(), self.handles.len());
                self.handles.push(child_handle);
                self.tree.resolve_pending_expansion(parent)?;
                self.budget.inflight_expansions -= 1;
                self.committed_actions += 1;
                self.log(RunEventKind::ExpandCommit { action_seq, parent, child });
            }
            Outcome::Evaluated { action_seq, agent, task, success } => {
                self.tree.record_evaluation(agent, task, success)?;
                self.budget.inflight_evals -= 1;
                self.budget.committed_evals += 1;
                self.committed_actions += 1;
                self.log(RunEventKind::EvalCommit { action_seq, agent, task, success });
            }
            Outcome::Failed { action_seq } => {
                // Counters untouched; release the reservation so the slot is
                // retried by a later decision.
                self.release_reservation(action_seq)?;
                self.log(RunEventKind::ActionFailed { action_seq });
            }
        }
        Ok(())
    }

    fn release_reservation(&mut self, action_seq: u64) -> Result<()> {
        // Scan our own log for the matching Start; failures are rare enough
        // that a linear scan is fine.
        let start = self
            .events
            .iter()
            .rev()
            .find_map(|e| match e.kind {
                RunEventKind::ExpandStart { action_seq: a, parent, .. } if a == action_seq => {
                    Some(Action::Expand { parent })
                }
                RunEventKind::EvalStart { action_seq: a, agent, task } if a == action_seq => {
                    Some(Action::Evaluate { agent, task })
                }
                _ => None,
            })
            .ok_or_else(|| HgmError::Usage(format!("no start for failed action {action_seq}")))?;
        match start {
            Action::Expand { parent } => {
                self.tree.resolve_pending_expansion(parent)?;
                self.budget.inflight_expansions -= 1;
            }
            Action::Evaluate { agent, task } => {
                self.tree.cancel_evaluation(agent, task)?;
                self.budget.inflight_evals -= 1;
            }
        }
        Ok(())
    }

    fn final_selection(&mut self) -> Result<AgentId> {
        let best = match self.cfg.policy_kind {
            PolicyKind::Hgm => best_belief_agent(&self.tree, self.cfg.policy.epsilon_percentile)?,
            // The comparison policies select by empirical mean.
            PolicyKind::Greedy | PolicyKind::DgmLike => best_by_empirical_mean(&self.tree),
        };
        self.log(RunEventKind::FinalSelection {
            best,
            total_success: self.tree.total_success(),
            total_failure: self.tree.total_failure(),
        });
        Ok(best)
    }
}

fn run_dispatch<E: Executor>(exec: &E, seed: u64, dispatch: Dispatch) -> Outcome {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match dispatch {
        Dispatch::Expand { action_seq, parent, handle, .. } => {
            let mut rng = action_rng(seed, action_seq);
            let child_handle = exec.expand(handle, &mut rng);
            Outcome::Expanded { action_seq, parent, child_handle }
        }
        Dispatch::Eval { action_seq, agent, handle, task } => {
            let mut rng = action_rng(seed, action_seq);
            let success = exec.evaluate(handle, task, &mut rng);
            Outcome::Evaluated { action_seq, agent, task, success }
        }
    }));
    match result {
        Ok(outcome) => outcome,
        // A panicking executor call marks the action failed; the coordinator
        // releases the reservation and retries the slot.
        Err(_) => Outcome::Failed {
            action_seq: match dispatch {
                Dispatch::Expand { action_seq, .. } | Dispatch::Eval { action_seq, .. } => action_seq,
            },
        },
    }
}

/// Deterministic single-threaded driver.
pub fn run_sequential_with<E: Executor>(
    cfg: &RunConfig,
    exec: &E,
) -> Result<(SearchTree, AgentId, EventLog, bool, Vec<AgentHandle>)> {
    let mut engine = Engine::new(cfg, exec)?;
    for _ in 0..cfg.effective_init_expansions() {
        let d = engine.dispatch_init_expansion()?;
        let outcome = engine.execute_inline(d);
        engine.commit(outcome)?;
    }
    while !engine.budget.exhausted() {
        match engine.decide()? {
            Some(d) => {
                let outcome = engine.execute_inline(d);
                engine.commit(outcome)?;
            }
            None => break,
        }
    }
    let best = engine.final_selection()?;
    let log = EventLog {
        header: LogHeader { schema_version: LOG_SCHEMA_VERSION, config: cfg.clone() },
        events: engine.events,
    };
    Ok((engine.tree, best, log, engine.starved, engine.handles))
}

/// Asynchronous driver: one coordinator owns all mutable state; workers
/// execute dispatched actions on their own keyed rng streams. With a single
/// worker the emitted log is identical to the sequential driver's.
pub fn run_async_with<E: Executor>(
    cfg: &RunConfig,
    exec: &E,
) -> Result<(SearchTree, AgentId, EventLog, bool, Vec<AgentHandle>)> {
    cfg.validate()?;
    let workers = cfg.workers as usize;
    let simulate_latency = cfg.env.latency_ms_const > 0.0 || cfg.env.latency_ms_exp > 0.0;

    let mut engine = Engine::new(cfg, exec)?;
    let (result_tx, result_rx) = mpsc::channel::<(usize, Outcome)>();

    std::thread::scope(|scope| -> Result<()> {
        let mut job_txs = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::channel::<Dispatch>();
            job_txs.push(tx);
            let result_tx = result_tx.clone();
            let env_cfg: EnvConfig = cfg.env.clone();
            let seed = cfg.seed;
            let exec_ref = &*exec;
            scope.spawn(move || {
                while let Ok(dispatch) = rx.recv() {
                    if simulate_latency {
                        let action_seq = match dispatch {
                            Dispatch::Expand { action_seq, .. }
                            | Dispatch::Eval { action_seq, .. } => action_seq,
                        };
                        // Latency stream is separate from the outcome stream
                        // so delays never perturb results.
                        let mut lat_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_7465);
                        lat_rng.set_stream(action_seq);
                        let ms = crate::env::sample_latency_ms(&env_cfg, &mut lat_rng);
                        if ms > 0.0 {
                            std::thread::sleep(std::time::Duration::from_micros((ms * 1000.0) as u64));
                        }
                    }
                    let outcome = run_dispatch(exec_ref, seed, dispatch);
                    if result_tx.send((w, outcome)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(result_tx);

        let mut free: Vec<usize> = (0..workers).rev().collect();
        let mut busy = 0usize;
        let mut pending_init = engine.cfg.effective_init_expansions();

        loop {
            // Dispatch while we have free workers and useful work.
            while let Some(&worker) = free.last() {
                if pending_init > 0 {
                    let d = engine.dispatch_init_expansion()?;
                    pending_init -= 1;
                    job_txs[worker].send(d).expect("worker alive");
                    free.pop();
                    busy += 1;
                    continue;
                }
                // Hold the decision loop until the forced initialization has
                // fully committed.
                if engine.budget.inflight_expansions > 0 && engine.tree.len() == 1 {
                    break;
                }
                if engine.budget.exhausted() || !engine.budget.can_dispatch_eval() {
                    break;
                }
                match engine.decide()? {
                    Some(d) => {
                        job_txs[worker].send(d).expect("worker alive");
                        free.pop();
                        busy += 1;
                    }
                    None => break,
                }
            }

            if busy == 0 {
                break;
            }
            let (worker, outcome) = result_rx.recv().expect("workers alive while busy");
            engine.commit(outcome)?;
            free.push(worker);
            busy -= 1;
            // Drain any other completed work before deciding again.
            while let Ok((worker, outcome)) = result_rx.try_recv() {
                engine.commit(outcome)?;
                free.push(worker);
                busy -= 1;
            }
        }
        drop(job_txs);
        Ok(())
    })?;

    let best = engine.final_selection()?;
    let log = EventLog {
        header: LogHeader { schema_version: LOG_SCHEMA_VERSION, config: cfg.clone() },
        events: engine.events,
    };
    Ok((engine.tree, best, log, engine.starved, engine.handles))
}

fn output_from(
    exec: &SyntheticExecutor,
    parts: (SearchTree, AgentId, EventLog, bool, Vec<AgentHandle>),
) -> RunOutput {
    let (tree, best, log, starved, handles) = parts;
    let raw = exec.latents_snapshot();
    let latents = handles.iter().map(|h| raw[h.0 as usize]).collect();
    RunOutput { tree, best, log, latents, starved }
}

/// Sequential run on the synthetic environment.
pub fn run_sequential(cfg: &RunConfig) -> Result<RunOutput> {
    let exec = SyntheticExecutor::new(cfg.env.clone())?;
    let parts = run_sequential_with(cfg, &exec)?;
    Ok(output_from(&exec, parts))
}

/// Asynchronous run on the synthetic environment.
pub fn run_async(cfg: &RunConfig) -> Result<RunOutput> {
    let exec = SyntheticExecutor::new(cfg.env.clone())?;
    let parts = run_async_with(cfg, &exec)?;
    Ok(output_from(&exec, parts))
}

/// Run the configured driver: sequential when workers == 1.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.workers <= 1 {
        run_sequential(cfg)
    } else {
        run_async(cfg)
    }
}

/// Monte-Carlo ground-truth clade-metaproductivity: continue the configured
/// policy from the given state until budget exhaustion and average the best
/// true utility inside the node's clade. Returns (mean, standard error).
pub fn true_cmp(
    tree: &SearchTree,
    latents: &[LatentAgent],
    node: AgentId,
    cfg: &RunConfig,
    committed_evals: u64,
    rollouts: u32,
    base_seed: u64,
) -> Result<(f64, f64)> {
    if rollouts == 0 {
        return Err(HgmError::Param("rollouts must be at least 1".into()));
    }
    tree.node(node)?;
    if latents.len() != tree.len() {
        return Err(HgmError::Param("latents must cover every tree node".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..rollouts {
        let mut roll_cfg = cfg.clone();
        roll_cfg.seed = base_seed.wrapping_add(r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let exec = SyntheticExecutor::from_latents(roll_cfg.env.clone(), latents.to_vec())?;
        let mut engine = Engine::from_state(&roll_cfg, &exec, tree.clone(), committed_evals);
        while !engine.budget.exhausted() {
            match engine.decide()? {
                Some(d) => {
                    let outcome = engine.execute_inline(d);
                    engine.commit(outcome)?;
                }
                None => break,
            }
        }
        let all = exec.latents_snapshot();
        let handles = &engine.handles;
        let best_u = engine
            .tree
            .clade_members(node)?
            .into_iter()
            .map(|id| all[handles[id.index()].0 as usize].u)
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best_u;
        sum_sq += best_u * best_u;
    }
    let n = rollouts as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Rebuild the final committed tree from a log without verification.
pub fn reconstruct_tree(log: &EventLog) -> Result<SearchTree> {
    if log.header.schema_version != LOG_SCHEMA_VERSION {
        return Err(HgmError::Usage(format!(
            "log schema version {} is not supported (expected {})",
            log.header.schema_version, LOG_SCHEMA_VERSION
        )));
    }
    let mut tree = SearchTree::new(log.header.config.env.task_count)?;
    for ev in &log.events {
        match &ev.kind {
            RunEventKind::ExpandCommit { parent, child, .. } => {
                let got = tree.add_child(*parent)?;
                if got != *child {
                    return Err(HgmError::Verification(format!(
                        "log child id {child} does not match reconstruction {got}"
                    )));
                }
            }
            RunEventKind::EvalCommit { agent, task, success, .. } => {
                tree.begin_evaluation(*agent, *task)?;
                tree.record_evaluation(*agent, *task, *success)?;
            }
            _ => {}
        }
    }
    Ok(tree)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub events_checked: usize,
    pub eval_commits: u64,
    pub divergences: Vec<(u64, String)>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.divergences.is_empty()
    }

    pub fn first_divergence(&self) -> Option<&(u64, String)> {
        self.divergences.first()
    }
}

/// Re-derives every decision and recomputes all counters from the event log,
/// flagging the first divergence. Selection choices are regenerated from the
/// keyed rng streams, so a tampered log cannot survive replay.
pub fn replay(log: &EventLog) -> Result<ReplayReport> {
    if log.header.schema_version != LOG_SCHEMA_VERSION {
        return Err(HgmError::Usage(format!(
            "log schema version {} is not supported (expected {})",
            log.header.schema_version, LOG_SCHEMA_VERSION
        )));
    }
    let cfg = &log.header.config;
    cfg.validate()?;
    let mut tree = SearchTree::new(cfg.env.task_count)?;
    let mut budget = BudgetState::new(cfg.budget);
    let mut divergences: Vec<(u64, String)> = Vec::new();
    let mut last_seq: Option<u64> = None;
    // action_seq -> start record, awaiting its commit.
    let mut open_actions: HashMap<u64, Action> = HashMap::new();
    // Expected Start contents derived from the preceding Decision.
    let mut expected_start: Option<(u64, Action)> = None;
    let mut final_seen = false;

    let diverge = |divergences: &mut Vec<(u64, String)>, seq: u64, msg: String| {
        divergences.push((seq, msg));
    };

    for ev in &log.events {
        if let Some(prev) = last_seq {
            if ev.seq <= prev {
                diverge(&mut divergences, ev.seq, format!("seq not strictly increasing after {prev}"));
            }
        }
        last_seq = Some(ev.seq);
        if final_seen {
            diverge(&mut divergences, ev.seq, "event after final selection".into());
        }
        if let Some((want_seq, _)) = expected_start {
            let matches = matches!(
                ev.kind,
                RunEventKind::ExpandStart { action_seq, .. } if action_seq == want_seq
            ) || matches!(
                ev.kind,
                RunEventKind::EvalStart { action_seq, .. } if action_seq == want_seq
            );
            if !matches {
                diverge(&mut divergences, ev.seq, format!("decision for action {want_seq} not followed by its start"));
                expected_start = None;
            }
        }

        match &ev.kind {
            RunEventKind::Decision {
                decision_seq,
                action_seq,
                action,
                starved,
                tau,
                widening_n,
                effective_size,
                tree_size,
                committed,
                inflight_evals,
                inflight_expansions,
                total_success,
                total_failure,
            } => {
                let eff = tree.len() as u64 + budget.inflight_expansions;
                let snapshot_ok = *widening_n == budget.widening_n()
                    && *effective_size == eff
                    && *tree_size == tree.len() as u64
                    && *committed == budget.committed_evals
                    && *inflight_evals == budget.inflight_evals
                    && *inflight_expansions == budget.inflight_expansions
                    && *total_success == tree.total_success()
                    && *total_failure == tree.total_failure();
                if !snapshot_ok {
                    diverge(&mut divergences, ev.seq, format!("decision {decision_seq}: snapshot mismatch with reconstructed state"));
                }
                let expected_tau = match cfg.policy.scheduler {
                    SchedulerKind::BOverB => {
                        cfg.budget as f64 / (cfg.budget - budget.committed_evals) as f64
                    }
                    SchedulerKind::Constant(t) => t,
                };
                if (*tau - expected_tau).abs() > 1e-12 {
                    diverge(&mut divergences, ev.seq, format!("decision {decision_seq}: tau {tau} != expected {expected_tau}"));
                }
                let tau_v = Tau::new(expected_tau)?;
                let mut rng = decision_rng(cfg.seed, *decision_seq);
                let rederived = match cfg.policy_kind {
                    PolicyKind::Hgm => {
                        let kind = decide_action_kind(&budget, eff, &cfg.policy);
                        match kind {
                            ActionKind::Evaluate => match select_evaluation_agent(&tree, tau_v, &mut rng) {
                                Ok(agent) => {
                                    let task = select_task(tree.node(agent)?, &mut rng)?;
                                    (ActionKind::Evaluate, false, Action::Evaluate { agent, task })
                                }
                                Err(_) => {
                                    let parent = select_expansion_parent(&tree, tau_v, &mut rng)?;
                                    (ActionKind::Expand, true, Action::Expand { parent })
                                }
                            },
                            ActionKind::Expand => {
                                let parent = select_expansion_parent(&tree, tau_v, &mut rng)?;
                                (ActionKind::Expand, false, Action::Expand { parent })
                            }
                        }
                    }
                    PolicyKind::Greedy => {
                        let a = greedy_policy_step(&tree, &mut rng)?;
                        let k = if matches!(a, Action::Expand { .. }) { ActionKind::Expand } else { ActionKind::Evaluate };
                        (k, false, a)
                    }
                    PolicyKind::DgmLike => {
                        let a = dgm_like_policy_step(&tree, &cfg.policy, &mut rng)?;
                        let k = if matches!(a, Action::Expand { .. }) { ActionKind::Expand } else { ActionKind::Evaluate };
                        (k, false, a)
                    }
                };
                let (exp_kind, exp_starved, exp_action) = rederived;
                if exp_kind != *action || exp_starved != *starved {
                    diverge(&mut divergences, ev.seq, format!(
                        "decision {decision_seq}: logged {action:?}/starved={starved}, rederived {exp_kind:?}/starved={exp_starved}"
                    ));
                }
                expected_start = Some((*action_seq, exp_action));
            }
            RunEventKind::ExpandStart { action_seq, parent, init } => {
                if *init {
                    if expected_start.is_some() {
                        diverge(&mut divergences, ev.seq, "init expansion inside decision loop".into());
                    }
                    if *parent != AgentId::ROOT {
                        diverge(&mut divergences, ev.seq, "init expansion not rooted".into());
                    }
                } else {
                    match expected_start.take() {
                        Some((want_seq, Action::Expand { parent: want_parent }))
                            if want_seq == *action_seq =>
                        {
                            if want_parent != *parent {
                                diverge(&mut divergences, ev.seq, format!(
                                    "expand start parent {parent} differs from rederived {want_parent}"
                                ));
                            }
                        }
                        other => {
                            diverge(&mut divergences, ev.seq, format!("unexpected expand start ({other:?})"));
                        }
                    }
                }
                tree.note_pending_expansion(*parent)?;
                budget.inflight_expansions += 1;
                open_actions.insert(*action_seq, Action::Expand { parent: *parent });
            }
            RunEventKind::EvalStart { action_seq, agent, task } => {
                match expected_start.take() {
                    Some((want_seq, Action::Evaluate { agent: want_agent, task: want_task }))
                        if want_seq == *action_seq =>
                    {
                        if (want_agent, want_task) != (*agent, *task) {
                            diverge(&mut divergences, ev.seq, format!(
                                "eval start ({agent}, {}) differs from rederived ({want_agent}, {})",
                                task.0, want_task.0
                            ));
                        }
                    }
                    other => {
                        diverge(&mut divergences, ev.seq, format!("unexpected eval start ({other:?})"));
                    }
                }
                if let Err(e) = tree.begin_evaluation(*agent, *task) {
                    diverge(&mut divergences, ev.seq, format!("begin evaluation: {e}"));
                }
                budget.inflight_evals += 1;
                if budget.committed_evals + budget.inflight_evals > cfg.budget {
                    diverge(&mut divergences, ev.seq, "committed + inflight exceeds budget".into());
                }
                open_actions.insert(*action_seq, Action::Evaluate { agent: *agent, task: *task });
            }
            RunEventKind::ExpandCommit { action_seq, parent, child } => {
                match open_actions.remove(action_seq) {
                    Some(Action::Expand { parent: p }) if p == *parent => {}
                    other => {
                        diverge(&mut divergences, ev.seq, format!("expand commit without matching start ({other:?})"));
                    }
                }
                let got = tree.add_child(*parent)?;
                if got != *child {
                    diverge(&mut divergences, ev.seq, format!("child id {child} != reconstructed {got}"));
                }
                tree.resolve_pending_expansion(*parent)?;
                budget.inflight_expansions -= 1;
            }
            RunEventKind::EvalCommit { action_seq, agent, task, success } => {
                match open_actions.remove(action_seq) {
                    Some(Action::Evaluate { agent: a, task: t }) if (a, t) == (*agent, *task) => {}
                    other => {
                        diverge(&mut divergences, ev.seq, format!("eval commit without matching start ({other:?})"));
                    }
                }
                if let Err(e) = tree.record_evaluation(*agent, *task, *success) {
                    diverge(&mut divergences, ev.seq, format!("record evaluation: {e}"));
                }
                budget.inflight_evals = budget.inflight_evals.saturating_sub(1);
                budget.committed_evals += 1;
            }
            RunEventKind::ActionFailed { action_seq } => {
                match open_actions.remove(action_seq) {
                    Some(Action::Expand { parent }) => {
                        tree.resolve_pending_expansion(parent)?;
                        budget.inflight_expansions -= 1;
                    }
                    Some(Action::Evaluate { agent, task }) => {
                        tree.cancel_evaluation(agent, task)?;
                        budget.inflight_evals -= 1;
                    }
                    None => {
                        diverge(&mut divergences, ev.seq, "failure without matching start".into());
                    }
                }
            }
            RunEventKind::FinalSelection { best, total_success, total_failure } => {
                final_seen = true;
                if *total_success != tree.total_success() || *total_failure != tree.total_failure() {
                    diverge(&mut divergences, ev.seq, "final counter digest mismatch".into());
                }
                let expected = match cfg.policy_kind {
                    PolicyKind::Hgm => best_belief_agent(&tree, cfg.policy.epsilon_percentile)?,
                    _ => best_by_empirical_mean(&tree),
                };
                if expected != *best {
                    diverge(&mut divergences, ev.seq, format!("final selection {best} != recomputed {expected}"));
                }
            }
        }
    }

    if !open_actions.is_empty() {
        diverge(&mut divergences, last_seq.unwrap_or(0), format!("{} starts never committed", open_actions.len()));
    }
    if let Err(e) = tree.check_invariants() {
        diverge(&mut divergences, last_seq.unwrap_or(0), format!("tree invariants: {e}"));
    }
    if !final_seen {
        diverge(&mut divergences, last_seq.unwrap_or(0), "log has no final selection".into());
    }

    Ok(ReplayReport {
        events_checked: log.events.len(),
        eval_commits: budget.committed_evals,
        divergences,
    })
}
