//! Desk-scale numerical verification that clade-metaproductivity equals the
//! Q-values of the accept/reject POMDP on exhaustively solvable micro-MDPs,
//! and that the CMP-greedy rule matches the dynamic-programming optimum.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};

/// Finite-kernel self-modification model: a handful of agent types, a
/// transition row per type over child types, and a small modification budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroMdp {
    pub utilities: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub budget: u32,
    pub root_type: usize,
}

impl MicroMdp {
    pub fn validate(&self) -> Result<()> {
        let k = self.utilities.len();
        if k == 0 {
            return Err(HgmError::Param("at least one agent type required".into()));
        }
        if self.transition.len() != k {
            return Err(HgmError::Param("transition matrix must have one row per type".into()));
        }
        for (i, u) in self.utilities.iter().enumerate() {
            if !(u.is_finite() && (0.0..=1.0).contains(u)) {
                return Err(HgmError::Param(format!("utility of type {i} out of [0,1]: {u}")));
            }
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(HgmError::Param(format!("transition row {i} has wrong length")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(HgmError::Param(format!("negative entry in transition row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(HgmError::Param(format!("transition row {i} sums to {sum}")));
            }
        }
        if self.root_type >= k {
            return Err(HgmError::Param(format!("root_type {} out of range", self.root_type)));
        }
        Ok(())
    }

    pub fn type_count(&self) -> usize {
        self.utilities.len()
    }
}

/// Observation of the accept/reject process: the current parent and child
/// types plus the remaining modification budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GodelState {
    pub parent_type: usize,
    pub child_type: usize,
    pub remaining_budget: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GodelAction {
    KeepParent,
    AcceptChild,
}

impl GodelAction {
    pub const BOTH: [GodelAction; 2] = [GodelAction::KeepParent, GodelAction::AcceptChild];

    fn selected_type(self, state: GodelState) -> usize {
        match self {
            GodelAction::KeepParent => state.parent_type,
            GodelAction::AcceptChild => state.child_type,
        }
    }
}

/// Comparison margin for accept-vs-keep decisions; differences below this are
/// treated as ties (which break to the parent).
const DECISION_TIE_EPS: f64 = 1e-9;

fn terminal_value(mdp: &MicroMdp, state: GodelState) -> f64 {
    mdp.utilities[state.parent_type].max(mdp.utilities[state.child_type])
}

/// Exact backward-induction state-action value.
///
/// At zero budget both actions collapse to the terminal score, which picks
/// the better of the observed parent and child.
pub fn q_value(mdp: &MicroMdp, state: GodelState, action: GodelAction) -> f64 {
    let mut memo = HashMap::new();
    q_value_memo(mdp, state, action, &mut memo)
}

fn q_value_memo(
    mdp: &MicroMdp,
    state: GodelState,
    action: GodelAction,
    memo: &mut HashMap<(GodelState, GodelAction), f64>,
) -> f64 {
    if state.remaining_budget == 0 {
        return terminal_value(mdp, state);
    }
    if let Some(&v) = memo.get(&(state, action)) {
        return v;
    }
    let parent = action.selected_type(state);
    let mut value = 0.0;
    for (child, &p) in mdp.transition[parent].iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let next = GodelState {
            parent_type: parent,
            child_type: child,
            remaining_budget: state.remaining_budget - 1,
        };
        let best = GodelAction::BOTH
            .into_iter()
            .map(|a| q_value_memo(mdp, next, a, memo))
            .fold(f64::NEG_INFINITY, f64::max);
        value += p * best;
    }
    memo.insert((state, action), value);
    value
}

/// CMP-based state-action values of the CMP-greedy policy, built by forward
/// recursion on the budget (never consulting the DP above).
struct CmpGreedy<'a> {
    mdp: &'a MicroMdp,
    memo: HashMap<(GodelState, GodelAction), f64>,
}

impl<'a> CmpGreedy<'a> {
    fn new(mdp: &'a MicroMdp) -> Self {
        CmpGreedy { mdp, memo: HashMap::new() }
    }

    fn cmp(&mut self, state: GodelState, action: GodelAction) -> f64 {
        if state.remaining_budget == 0 {
            return terminal_value(self.mdp, state);
        }
        if let Some(&v) = self.memo.get(&(state, action)) {
            return v;
        }
        let parent = action.selected_type(state);
        let mut value = 0.0;
        for child in 0..self.mdp.type_count() {
            let p = self.mdp.transition[parent][child];
            if p == 0.0 {
                continue;
            }
            let next = GodelState {
                parent_type: parent,
                child_type: child,
                remaining_budget: state.remaining_budget - 1,
            };
            let act = self.decide(next);
            value += p * self.cmp(next, act);
        }
        self.memo.insert((state, action), value);
        value
    }

    /// Greedy accept/reject by CMP comparison; ties go to the parent.
    fn decide(&mut self, state: GodelState) -> GodelAction {
        let keep = self.cmp(state, GodelAction::KeepParent);
        let accept = self.cmp(state, GodelAction::AcceptChild);
        if accept > keep + DECISION_TIE_EPS {
            GodelAction::AcceptChild
        } else {
            GodelAction::KeepParent
        }
    }
}

const TRAJECTORY_LIMIT: u64 = 1_000_000;

/// Exact CMP of taking `action` at `state` under the CMP-greedy policy,
/// computed by explicit trajectory enumeration: every stochastic branch is
/// walked with its probability, terminal values are the final observation's
/// best utility. Also returns the total probability mass of the enumerated
/// trajectories, which must be 1 up to rounding.
pub fn cmp_exact(mdp: &MicroMdp, state: GodelState, action: GodelAction) -> Result<(f64, f64)> {
    let mut greedy = CmpGreedy::new(mdp);
    let mut count = 0u64;
    let mut mass = 0.0;
    let value = enumerate(mdp, &mut greedy, state, action, 1.0, &mut count, &mut mass)?;
    Ok((value, mass))
}

fn enumerate(
    mdp: &MicroMdp,
    greedy: &mut CmpGreedy,
    state: GodelState,
    action: GodelAction,
    prob: f64,
    count: &mut u64,
    mass: &mut f64,
) -> Result<f64> {
    if state.remaining_budget == 0 {
        *count += 1;
        if *count > TRAJECTORY_LIMIT {
            return Err(HgmError::Capacity(format!(
                "trajectory enumeration exceeded {TRAJECTORY_LIMIT}"
            )));
        }
        *mass += prob;
        return Ok(prob * terminal_value(mdp, state));
    }
    let parent = action.selected_type(state);
    let mut acc = 0.0;
    for (child, &p) in mdp.transition[parent].iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let next = GodelState {
            parent_type: parent,
            child_type: child,
            remaining_budget: state.remaining_budget - 1,
        };
        let act = greedy.decide(next);
        acc += enumerate(mdp, greedy, next, act, prob * p, count, mass)?;
    }
    Ok(acc)
}

/// Monte-Carlo rollout of the CMP-greedy policy; (mean, standard error).
pub fn cmp_monte_carlo<R: Rng + ?Sized>(
    mdp: &MicroMdp,
    state: GodelState,
    action: GodelAction,
    rollouts: u32,
    rng: &mut R,
) -> (f64, f64) {
    let mut greedy = CmpGreedy::new(mdp);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..rollouts {
        let mut s = state;
        let mut a = action;
        while s.remaining_budget > 0 {
            let parent = a.selected_type(s);
            let row = &mdp.transition[parent];
            let mut target: f64 = rng.random();
            let mut child = row.len() - 1;
            for (i, &p) in row.iter().enumerate() {
                target -= p;
                if target <= 0.0 {
                    child = i;
                    break;
                }
            }
            s = GodelState {
                parent_type: parent,
                child_type: child,
                remaining_budget: s.remaining_budget - 1,
            };
            a = greedy.decide(s);
        }
        let v = terminal_value(mdp, s);
        sum += v;
        sum_sq += v * v;
    }
    let n = rollouts as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremViolation {
    pub state: GodelState,
    pub action: Option<GodelAction>,
    pub cmp: f64,
    pub q: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub states_checked: usize,
    pub pairs_checked: usize,
    pub max_abs_gap: f64,
    pub violations: Vec<TheoremViolation>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// All states reachable from the root's first self-modification, under any
/// sequence of accept/reject choices.
pub fn reachable_states(mdp: &MicroMdp) -> Vec<GodelState> {
    let mut seen = BTreeSet::new();
    let mut stack = Vec::new();
    for (child, &p) in mdp.transition[mdp.root_type].iter().enumerate() {
        if p > 0.0 {
            let s = (mdp.root_type, child, mdp.budget.saturating_sub(1));
            if seen.insert(s) {
                stack.push(s);
            }
        }
    }
    while let Some((parent, child, b)) = stack.pop() {
        if b == 0 {
            continue;
        }
        for new_parent in [parent, child] {
            for (c2, &p) in mdp.transition[new_parent].iter().enumerate() {
                if p > 0.0 {
                    let s = (new_parent, c2, b - 1);
                    if seen.insert(s) {
                        stack.push(s);
                    }
                }
            }
        }
    }
    seen.into_iter()
        .map(|(parent_type, child_type, remaining_budget)| GodelState {
            parent_type,
            child_type,
            remaining_budget,
        })
        .collect()
}

/// Checks, over every reachable (state, action) pair, that the exact CMP of
/// the greedy policy equals the DP Q-value to 1e-9 and that the CMP-greedy
/// decision matches the DP-optimal decision (ties to the parent).
pub fn verify_theorem(mdp: &MicroMdp) -> Result<TheoremReport> {
    mdp.validate()?;
    let states = reachable_states(mdp);
    let mut violations = Vec::new();
    let mut pairs = 0usize;
    let mut max_gap = 0.0f64;
    let mut q_memo = HashMap::new();
    let mut greedy = CmpGreedy::new(mdp);
    for &state in &states {
        let mut cmp_by_action = [0.0f64; 2];
        let mut q_by_action = [0.0f64; 2];
        for (i, action) in GodelAction::BOTH.into_iter().enumerate() {
            pairs += 1;
            let (cmp, mass) = cmp_exact(mdp, state, action)?;
            let q = q_value_memo(mdp, state, action, &mut q_memo);
            cmp_by_action[i] = cmp;
            q_by_action[i] = q;
            let gap = (cmp - q).abs();
            max_gap = max_gap.max(gap);
            if gap > 1e-9 {
                violations.push(TheoremViolation {
                    state,
                    action: Some(action),
                    cmp,
                    q,
                    detail: format!("|cmp - q| = {gap:.3e}"),
                });
            }
            if (mass - 1.0).abs() > 1e-12 {
                violations.push(TheoremViolation {
                    state,
                    action: Some(action),
                    cmp,
                    q,
                    detail: format!("trajectory probabilities sum to {mass}"),
                });
            }
        }
        let cmp_decision = greedy.decide(state);
        let dp_decision = if q_by_action[1] > q_by_action[0] + DECISION_TIE_EPS {
            GodelAction::AcceptChild
        } else {
            GodelAction::KeepParent
        };
        if cmp_decision != dp_decision {
            violations.push(TheoremViolation {
                state,
                action: None,
                cmp: cmp_by_action[1] - cmp_by_action[0],
                q: q_by_action[1] - q_by_action[0],
                detail: format!("cmp-greedy chose {cmp_decision:?}, DP optimum is {dp_decision:?}"),
            });
        }
    }
    Ok(TheoremReport {
        states_checked: states.len(),
        pairs_checked: pairs,
        max_abs_gap: max_gap,
        violations,
    })
}

/// Random micro-MDP within the desk-scale verification envelope.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, max_types: usize, max_budget: u32) -> MicroMdp {
    let k = rng.random_range(2..=max_types.max(2));
    let utilities: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let transition: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().max(1e-6)).collect();
            let sum: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            // Renormalize exactly so validation's 1e-12 row-sum check holds.
            let s: f64 = row.iter().sum();
            let last = row.len() - 1;
            row[last] += 1.0 - s;
            row
        })
        .collect();
    MicroMdp {
        utilities,
        transition,
        budget: rng.random_range(1..=max_budget.max(1)),
        root_type: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_mdp(utils: Vec<f64>, budget: u32) -> MicroMdp {
        let k = utils.len();
        let transition = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        MicroMdp { utilities: utils, transition, budget, root_type: 0 }
    }

    #[test]
    fn q_value_terminal_case() {
        let mdp = identity_mdp(vec![0.6, 0.4], 0);
        let s = GodelState { parent_type: 0, child_type: 1, remaining_budget: 0 };
        for a in GodelAction::BOTH {
            assert_eq!(q_value(&mdp, s, a), 0.6);
        }
    }

    #[test]
    fn q_value_identity_transition() {
        for budget in 1..=4 {
            let mdp = identity_mdp(vec![0.7, 0.2], budget);
            let s = GodelState { parent_type: 0, child_type: 1, remaining_budget: budget };
            assert!((q_value(&mdp, s, GodelAction::KeepParent) - 0.7).abs() < 1e-15);
            assert!((q_value(&mdp, s, GodelAction::AcceptChild) - 0.2).abs() < 1e-15);
        }
    }

    /// Independent plain recursion without memoization, for the hand-scale
    /// cross-check.
    fn q_brute(mdp: &MicroMdp, s: GodelState, a: GodelAction) -> f64 {
        if s.remaining_budget == 0 {
            return mdp.utilities[s.parent_type].max(mdp.utilities[s.child_type]);
        }
        let parent = a.selected_type(s);
        mdp.transition[parent]
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(c, p)| {
                let next = GodelState {
                    parent_type: parent,
                    child_type: c,
                    remaining_budget: s.remaining_budget - 1,
                };
                p * GodelAction::BOTH
                    .into_iter()
                    .map(|a2| q_brute(mdp, next, a2))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum()
    }

    #[test]
    fn q_value_matches_brute_enumeration_two_types() {
        let mdp = MicroMdp {
            utilities: vec![0.3, 0.8],
            transition: vec![vec![0.6, 0.4], vec![0.1, 0.9]],
            budget: 2,
            root_type: 0,
        };
        for pt in 0..2 {
            for ct in 0..2 {
                for b in 0..=2 {
                    let s = GodelState { parent_type: pt, child_type: ct, remaining_budget: b };
                    for a in GodelAction::BOTH {
                        assert!((q_value(&mdp, s, a) - q_brute(&mdp, s, a)).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn q_value_monotone_in_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mdp = random_mdp(&mut rng, 4, 4);
            let s0 = GodelState { parent_type: 0, child_type: 1 % mdp.type_count(), remaining_budget: 0 };
            let mut prev = f64::NEG_INFINITY;
            for b in 0..=mdp.budget {
                let s = GodelState { remaining_budget: b, ..s0 };
                let v = GodelAction::BOTH
                    .into_iter()
                    .map(|a| q_value(&mdp, s, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= prev - 1e-12, "budget {b}: {v} < {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn cmp_exact_trivial_cases() {
        let mdp = identity_mdp(vec![0.6, 0.4], 0);
        let s = GodelState { parent_type: 1, child_type: 0, remaining_budget: 0 };
        let (v, mass) = cmp_exact(&mdp, s, GodelAction::KeepParent).unwrap();
        assert_eq!(v, 0.6);
        assert_eq!(mass, 1.0);

        // Deterministic chain: type 0 always produces type 1, which
        // reproduces itself; single trajectory, value computable by hand.
        let mdp = MicroMdp {
            utilities: vec![0.2, 0.9],
            transition: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            budget: 2,
            root_type: 0,
        };
        let s = GodelState { parent_type: 0, child_type: 1, remaining_budget: 2 };
        let (v, mass) = cmp_exact(&mdp, s, GodelAction::AcceptChild).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        assert!((mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cmp_equals_q_on_random_three_type_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let mut mdp = random_mdp(&mut rng, 3, 3);
            mdp.budget = 3;
            for state in reachable_states(&mdp) {
                for action in GodelAction::BOTH {
                    let (cmp, _) = cmp_exact(&mdp, state, action).unwrap();
                    let q = q_value(&mdp, state, action);
                    assert!(
                        (cmp - q).abs() <= 1e-9,
                        "state {state:?} action {action:?}: cmp={cmp} q={q}"
                    );
                }
            }
        }
    }

    #[test]
    fn cmp_monte_carlo_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = MicroMdp {
            utilities: vec![0.2, 0.5, 0.9],
            transition: vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.3, 0.4],
            ],
            budget: 3,
            root_type: 0,
        };
        let s = GodelState { parent_type: 0, child_type: 1, remaining_budget: 3 };
        for a in GodelAction::BOTH {
            let (exact, _) = cmp_exact(&mdp, s, a).unwrap();
            let (mc, se) = cmp_monte_carlo(&mdp, s, a, 40_000, &mut rng);
            assert!((mc - exact).abs() <= 3.0 * se.max(1e-4), "{mc} vs {exact} (se {se})");
        }
    }

    #[test]
    fn verify_identity_mdp_keeps_parent() {
        let mdp = identity_mdp(vec![0.5, 0.5], 3);
        let report = verify_theorem(&mdp).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        let mut greedy = CmpGreedy::new(&mdp);
        for state in reachable_states(&mdp) {
            assert_eq!(greedy.decide(state), GodelAction::KeepParent);
        }
    }

    #[test]
    fn verify_dominant_child_type_accepted() {
        // Type 1's children are strictly better than type 0's in every way.
        let mdp = MicroMdp {
            utilities: vec![0.1, 0.9],
            transition: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            budget: 3,
            root_type: 0,
        };
        let report = verify_theorem(&mdp).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        let mut greedy = CmpGreedy::new(&mdp);
        for state in reachable_states(&mdp) {
            if state.child_type == 1 && state.parent_type == 0 {
                assert_eq!(greedy.decide(state), GodelAction::AcceptChild);
            }
        }
    }

    #[test]
    fn random_mdps_pass_verification() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, 4, 4);
            let report = verify_theorem(&mdp).unwrap();
            assert!(report.passed(), "{:?}", report.violations);
        }
    }

    #[test]
    fn validation_rejects_bad_instances() {
        let mut mdp = identity_mdp(vec![0.5], 1);
        mdp.transition[0][0] = 0.9;
        assert!(mdp.validate().is_err());
        let mdp = identity_mdp(vec![1.5], 1);
        assert!(mdp.validate().is_err());
        let mut mdp = identity_mdp(vec![0.5, 0.5], 1);
        mdp.root_type = 7;
        assert!(mdp.validate().is_err());
    }
}
