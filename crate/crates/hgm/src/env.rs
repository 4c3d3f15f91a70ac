//! Synthetic self-improvement environment: latent (utility, metaproductivity)
//! lineage dynamics able to induce the metaproductivity-performance mismatch,
//! plus the abstract executor interface a real agent backend would implement.

use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::tree::TaskId;

/// Environment-side ground truth hidden from the policy: true per-task
/// success probability `u` and latent metaproductivity `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentAgent {
    pub u: f64,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDifficulty {
    Uniform,
    /// Per-task additive offsets on the success probability.
    Offsets(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task_count: u32,
    pub root_u: f64,
    pub root_m: f64,
    /// Maps metaproductivity to expected child-utility drift.
    pub drift_gain: f64,
    pub sigma_u: f64,
    pub sigma_m: f64,
    /// Correlation knob between u and m perturbations at mutation; strongly
    /// negative values induce the mismatch.
    pub u_m_coupling: f64,
    pub task_difficulty: TaskDifficulty,
    /// Optional simulated latency: constant plus exponential, milliseconds.
    #[serde(default)]
    pub latency_ms_const: f64,
    #[serde(default)]
    pub latency_ms_exp: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task_count: 60,
            root_u: 0.4,
            root_m: 0.5,
            drift_gain: 0.0,
            sigma_u: 0.0,
            sigma_m: 0.0,
            u_m_coupling: 0.0,
            task_difficulty: TaskDifficulty::Uniform,
            latency_ms_const: 0.0,
            latency_ms_exp: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_count == 0 {
            return Err(HgmError::Param("task_count must be at least 1".into()));
        }
        for (name, v, lo, hi) in [
            ("root_u", self.root_u, 0.0, 1.0),
            ("root_m", self.root_m, 0.0, 1.0),
            ("u_m_coupling", self.u_m_coupling, -1.0, 1.0),
        ] {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(HgmError::Param(format!("{name} must lie in [{lo},{hi}], got {v}")));
            }
        }
        for (name, v) in [("sigma_u", self.sigma_u), ("sigma_m", self.sigma_m)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HgmError::Param(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !self.drift_gain.is_finite() {
            return Err(HgmError::Param("drift_gain must be finite".into()));
        }
        if let TaskDifficulty::Offsets(offs) = &self.task_difficulty {
            if offs.len() != self.task_count as usize {
                return Err(HgmError::Param(format!(
                    "difficulty list has {} entries for {} tasks",
                    offs.len(),
                    self.task_count
                )));
            }
        }
        Ok(())
    }

    pub fn difficulty_offset(&self, task: TaskId) -> f64 {
        match &self.task_difficulty {
            TaskDifficulty::Uniform => 0.0,
            TaskDifficulty::Offsets(offs) => offs[task.index()],
        }
    }
}

pub fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn spawn_root(cfg: &EnvConfig) -> LatentAgent {
    LatentAgent { u: cfg.root_u, m: cfg.root_m }
}

/// Two independent standard normals from two uniform draws (Box-Muller).
fn two_normals<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Gaussian-perturbation lineage step.
///
/// RNG consumption contract: exactly two uniform draws per call (one
/// Box-Muller pair), independent of the configuration.
pub fn mutate<R: Rng + ?Sized>(parent: LatentAgent, cfg: &EnvConfig, rng: &mut R) -> LatentAgent {
    let (g1, g2) = two_normals(rng);
    let u = clip01(parent.u + cfg.drift_gain * (parent.m - 0.5) + cfg.sigma_u * g1);
    let c = cfg.u_m_coupling;
    let m = clip01(parent.m + cfg.sigma_m * (c * g1 + (1.0 - c * c).sqrt() * g2));
    LatentAgent { u, m }
}

/// Bernoulli evaluation with stationary per-(agent, task) success probability.
///
/// RNG consumption contract: exactly one uniform draw per call.
pub fn evaluate_task<R: Rng + ?Sized>(
    agent: LatentAgent,
    task: TaskId,
    cfg: &EnvConfig,
    rng: &mut R,
) -> bool {
    let p = clip01(agent.u + cfg.difficulty_offset(task));
    rng.random::<f64>() < p
}

/// Simulated action latency in milliseconds; one extra uniform draw when an
/// exponential component is configured.
pub fn sample_latency_ms<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> f64 {
    let mut latency = cfg.latency_ms_const;
    if cfg.latency_ms_exp > 0.0 {
        let u: f64 = rng.random::<f64>().max(1e-300);
        latency += -u.ln() * cfg.latency_ms_exp;
    }
    latency
}

/// Opaque agent handle carried by the executor interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentHandle(pub u32);

/// What a backend must provide: expansion and stochastic-but-stationary
/// per-(agent, task) evaluation. Calls may take arbitrary wall time and may
/// run concurrently; each call receives its own rng stream keyed by the run
/// seed and action sequence number so outcomes are schedule-independent.
pub trait Executor: Send + Sync {
    fn expand<R: Rng + ?Sized>(&self, parent: AgentHandle, rng: &mut R) -> AgentHandle;
    fn evaluate<R: Rng + ?Sized>(&self, agent: AgentHandle, task: TaskId, rng: &mut R) -> bool;
}

/// The synthetic backend over latent lineage dynamics.
pub struct SyntheticExecutor {
    cfg: EnvConfig,
    latents: Mutex<Vec<LatentAgent>>,
}

impl SyntheticExecutor {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let root = spawn_root(&cfg);
        Ok(SyntheticExecutor { cfg, latents: Mutex::new(vec![root]) })
    }

    /// Backend pre-seeded with known latents (handle i = latents[i]), used
    /// to continue a run from a snapshot.
    pub fn from_latents(cfg: EnvConfig, latents: Vec<LatentAgent>) -> Result<Self> {
        cfg.validate()?;
        if latents.is_empty() {
            return Err(HgmError::Param("latents must contain at least the root".into()));
        }
        Ok(SyntheticExecutor { cfg, latents: Mutex::new(latents) })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn latent(&self, handle: AgentHandle) -> LatentAgent {
        self.latents.lock().unwrap()[handle.0 as usize]
    }

    pub fn latents_snapshot(&self) -> Vec<LatentAgent> {
        self.latents.lock().unwrap().clone()
    }
}

impl Executor for SyntheticExecutor {
    fn expand<R: Rng + ?Sized>(&self, parent: AgentHandle, rng: &mut R) -> AgentHandle {
        let parent_latent = self.latent(parent);
        let child = mutate(parent_latent, &self.cfg, rng);
        let mut latents = self.latents.lock().unwrap();
        latents.push(child);
        AgentHandle(latents.len() as u32 - 1)
    }

    fn evaluate<R: Rng + ?Sized>(&self, agent: AgentHandle, task: TaskId, rng: &mut R) -> bool {
        evaluate_task(self.latent(agent), task, &self.cfg, rng)
    }
}
