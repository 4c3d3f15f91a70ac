//! The archive of agents: a rooted tree with per-node and clade-aggregated
//! success/failure counters maintained incrementally.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};

/// Dense node identifier, assigned in creation order. Root is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl AgentId {
    pub const ROOT: AgentId = AgentId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into the fixed task list shared by all agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: AgentId,
    pub parent: Option<AgentId>,
    pub children: Vec<AgentId>,
    pub n_success: u64,
    pub n_failure: u64,
    pub clade_success: u64,
    pub clade_failure: u64,
    /// Tasks reserved by dispatched-but-uncommitted evaluations.
    pub pending_tasks: BTreeSet<TaskId>,
    pub pending_expansions: u32,
    pub remaining_tasks: BTreeSet<TaskId>,
}

impl AgentNode {
    pub fn pending_evals(&self) -> usize {
        self.pending_tasks.len()
    }

    pub fn evaluations(&self) -> u64 {
        self.n_success + self.n_failure
    }

    /// Own empirical success rate; None with zero evaluations.
    pub fn empirical_mean(&self) -> Option<f64> {
        let n = self.evaluations();
        (n > 0).then(|| self.n_success as f64 / n as f64)
    }

    /// Eligible for an evaluation action: has an unreserved task left.
    pub fn has_remaining_tasks(&self) -> bool {
        !self.remaining_tasks.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTree {
    nodes: Vec<AgentNode>,
    task_count: u32,
}

impl SearchTree {
    pub fn new(task_count: u32) -> Result<Self> {
        if task_count == 0 {
            return Err(HgmError::Param("task_count must be at least 1".into()));
        }
        let mut tree = SearchTree { nodes: Vec::new(), task_count };
        tree.nodes.push(tree.fresh_node(AgentId::ROOT, None));
        Ok(tree)
    }

    fn fresh_node(&self, id: AgentId, parent: Option<AgentId>) -> AgentNode {
        AgentNode {
            id,
            parent,
            children: Vec::new(),
            n_success: 0,
            n_failure: 0,
            clade_success: 0,
            clade_failure: 0,
            pending_tasks: BTreeSet::new(),
            pending_expansions: 0,
            remaining_tasks: (0..self.task_count).map(TaskId).collect(),
        }
    }

    pub fn task_count(&self) -> u32 {
        self.task_count
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always has its root
    }

    pub fn root(&self) -> &AgentNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: AgentId) -> Result<&AgentNode> {
        self.nodes
            .get(id.index())
            .ok_or_else(|| HgmError::Usage(format!("unknown agent id {id}")))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &AgentNode> {
        self.nodes.iter()
    }

    /// Appends a fresh child under `parent`; counters start at zero so no
    /// ancestor clade counter moves.
    pub fn add_child(&mut self, parent: AgentId) -> Result<AgentId> {
        self.node(parent)?;
        let id = AgentId(self.nodes.len() as u32);
        let node = self.fresh_node(id, Some(parent));
        self.nodes.push(node);
        self.nodes[parent.index()].children.push(id);
        Ok(id)
    }

    /// Reserves `task` on `agent` for a dispatched evaluation.
    pub fn begin_evaluation(&mut self, agent: AgentId, task: TaskId) -> Result<()> {
        self.node(agent)?;
        let node = &mut self.nodes[agent.index()];
        if !node.remaining_tasks.remove(&task) {
            return Err(HgmError::Usage(format!(
                "task {} not available on agent {agent}",
                task.0
            )));
        }
        node.pending_tasks.insert(task);
        Ok(())
    }

    /// Returns a reserved task to the remaining pool (failed dispatch).
    pub fn cancel_evaluation(&mut self, agent: AgentId, task: TaskId) -> Result<()> {
        self.node(agent)?;
        let node = &mut self.nodes[agent.index()];
        if !node.pending_tasks.remove(&task) {
            return Err(HgmError::Usage(format!(
                "task {} was not pending on agent {agent}",
                task.0
            )));
        }
        node.remaining_tasks.insert(task);
        Ok(())
    }

    pub fn note_pending_expansion(&mut self, parent: AgentId) -> Result<()> {
        self.node(parent)?;
        self.nodes[parent.index()].pending_expansions += 1;
        Ok(())
    }

    pub fn resolve_pending_expansion(&mut self, parent: AgentId) -> Result<()> {
        self.node(parent)?;
        let node = &mut self.nodes[parent.index()];
        if node.pending_expansions == 0 {
            return Err(HgmError::Usage(format!(
                "no pending expansion on agent {parent}"
            )));
        }
        node.pending_expansions -= 1;
        Ok(())
    }

    /// Commits one evaluation outcome. The task must still be available on
    /// the agent or reserved as pending; each (agent, task) pair commits at
    /// most once.
    pub fn record_evaluation(
        &mut self,
        agent: AgentId,
        task: TaskId,
        success: bool,
    ) -> Result<()> {
        self.node(agent)?;
        if task.index() >= self.task_count as usize {
            return Err(HgmError::Param(format!("task {} out of range", task.0)));
        }
        {
            let node = &mut self.nodes[agent.index()];
            if !node.pending_tasks.remove(&task) && !node.remaining_tasks.remove(&task) {
                return Err(HgmError::Usage(format!(
                    "(agent {agent}, task {}) already evaluated",
                    task.0
                )));
            }
            if success {
                node.n_success += 1;
            } else {
                node.n_failure += 1;
            }
        }
        // Ancestor walk: the agent and everything above it absorbs the count.
        let mut cursor = Some(agent);
        while let Some(id) = cursor {
            let node = &mut self.nodes[id.index()];
            if success {
                node.clade_success += 1;
            } else {
                node.clade_failure += 1;
            }
            cursor = node.parent;
        }
        Ok(())
    }

    /// Clade-metaproductivity estimate: clade successes over clade
    /// evaluations; None while the clade has no evaluations.
    pub fn cmp_estimate(&self, agent: AgentId) -> Result<Option<f64>> {
        let node = self.node(agent)?;
        let total = node.clade_success + node.clade_failure;
        Ok((total > 0).then(|| node.clade_success as f64 / total as f64))
    }

    /// All nodes in the subtree rooted at `agent`, including `agent`.
    pub fn clade_members(&self, agent: AgentId) -> Result<Vec<AgentId>> {
        self.node(agent)?;
        let mut out = Vec::new();
        let mut stack = vec![agent];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id.index()].children.iter().copied());
        }
        out.sort();
        Ok(out)
    }

    /// Brute-force recomputation of a node's clade counters from per-node
    /// counts; the independent check for the incremental ancestor walk.
    pub fn recompute_clade_counts(&self, agent: AgentId) -> Result<(u64, u64)> {
        let members = self.clade_members(agent)?;
        let mut s = 0;
        let mut f = 0;
        for id in members {
            s += self.nodes[id.index()].n_success;
            f += self.nodes[id.index()].n_failure;
        }
        Ok((s, f))
    }

    /// Asserts every structural invariant; returns the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        for node in &self.nodes {
            let (s, f) = self.recompute_clade_counts(node.id)?;
            if (s, f) != (node.clade_success, node.clade_failure) {
                return Err(HgmError::Verification(format!(
                    "clade counters of agent {} are ({}, {}), recomputed ({s}, {f})",
                    node.id, node.clade_success, node.clade_failure
                )));
            }
            let accounted = node.evaluations()
                + node.remaining_tasks.len() as u64
                + node.pending_tasks.len() as u64;
            if accounted != self.task_count as u64 {
                return Err(HgmError::Verification(format!(
                    "agent {} task accounting {accounted} != task_count {}",
                    node.id, self.task_count
                )));
            }
            if node.id == AgentId::ROOT {
                if node.parent.is_some() {
                    return Err(HgmError::Verification("root has a parent".into()));
                }
            } else {
                match node.parent {
                    Some(p) if p < node.id => {}
                    _ => {
                        return Err(HgmError::Verification(format!(
                            "agent {} has invalid parent {:?}",
                            node.id, node.parent
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_success(&self) -> u64 {
        self.nodes[0].clade_success
    }

    pub fn total_failure(&self) -> u64 {
        self.nodes[0].clade_failure
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_tree_examples() {
        let t = SearchTree::new(60).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t.root().clade_success, t.root().clade_failure), (0, 0));
        let t = SearchTree::new(1).unwrap();
        assert_eq!(t.root().remaining_tasks.iter().copied().collect::<Vec<_>>(), vec![TaskId(0)]);
        let t = SearchTree::new(500).unwrap();
        assert_eq!(t.root().remaining_tasks.len(), 500);
        assert!(SearchTree::new(0).is_err());
    }

    #[test]
    fn add_child_examples() {
        let mut t = SearchTree::new(4).unwrap();
        let c = t.add_child(AgentId::ROOT).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t.node(c).unwrap().clade_success, t.node(c).unwrap().clade_failure), (0, 0));
        assert_eq!((t.root().clade_success, t.root().clade_failure), (0, 0));
        for _ in 0..4 {
            t.add_child(AgentId::ROOT).unwrap();
        }
        let kids = &t.root().children;
        assert_eq!(kids.len(), 5);
        assert!(kids.windows(2).all(|w| w[0] < w[1]));
        assert!(t.add_child(AgentId(99)).is_err());
    }

    #[test]
    fn record_evaluation_chain() {
        let mut t = SearchTree::new(10).unwrap();
        let a = t.add_child(AgentId::ROOT).unwrap();
        let b = t.add_child(a).unwrap();
        t.record_evaluation(b, TaskId(3), true).unwrap();
        for id in [b, a, AgentId::ROOT] {
            assert_eq!(t.node(id).unwrap().clade_success, 1);
        }
        assert_eq!(t.node(b).unwrap().n_success, 1);
        assert_eq!(t.node(a).unwrap().n_success, 0);
        assert_eq!(t.root().n_success, 0);
    }

    #[test]
    fn record_failure_on_singleton() {
        let mut t = SearchTree::new(2).unwrap();
        t.record_evaluation(AgentId::ROOT, TaskId(0), false).unwrap();
        let r = t.root();
        assert_eq!((r.n_success, r.n_failure), (0, 1));
        assert_eq!((r.clade_success, r.clade_failure), (0, 1));
    }

    #[test]
    fn no_repeat_evaluation() {
        let mut t = SearchTree::new(3).unwrap();
        t.record_evaluation(AgentId::ROOT, TaskId(1), true).unwrap();
        assert!(t.record_evaluation(AgentId::ROOT, TaskId(1), false).is_err());
    }

    #[test]
    fn pending_bookkeeping() {
        let mut t = SearchTree::new(2).unwrap();
        t.begin_evaluation(AgentId::ROOT, TaskId(0)).unwrap();
        assert_eq!(t.root().pending_evals(), 1);
        assert!(t.begin_evaluation(AgentId::ROOT, TaskId(0)).is_err());
        t.record_evaluation(AgentId::ROOT, TaskId(0), true).unwrap();
        assert_eq!(t.root().pending_evals(), 0);
        t.begin_evaluation(AgentId::ROOT, TaskId(1)).unwrap();
        t.cancel_evaluation(AgentId::ROOT, TaskId(1)).unwrap();
        assert!(t.root().remaining_tasks.contains(&TaskId(1)));
        t.check_invariants().unwrap();
    }

    #[test]
    fn cmp_estimate_examples() {
        let mut t = SearchTree::new(20).unwrap();
        let a = t.add_child(AgentId::ROOT).unwrap();
        let x = t.add_child(a).unwrap();
        let y = t.add_child(a).unwrap();
        for i in 0..4 {
            t.record_evaluation(x, TaskId(i), true).unwrap();
            t.record_evaluation(y, TaskId(i), false).unwrap();
        }
        t.record_evaluation(a, TaskId(0), true).unwrap();
        t.record_evaluation(a, TaskId(1), false).unwrap();
        assert_eq!(t.cmp_estimate(a).unwrap(), Some(0.5));
        assert_eq!(t.cmp_estimate(x).unwrap(), Some(1.0));
        let leaf = t.add_child(y).unwrap();
        assert_eq!(t.cmp_estimate(leaf).unwrap(), None);
    }

    #[test]
    fn clade_members_examples() {
        let mut t = SearchTree::new(2).unwrap();
        let a = t.add_child(AgentId::ROOT).unwrap();
        let b = t.add_child(a).unwrap();
        assert_eq!(t.clade_members(b).unwrap(), vec![b]);
        assert_eq!(t.clade_members(a).unwrap(), vec![a, b]);
        assert_eq!(t.clade_members(AgentId::ROOT).unwrap(), vec![AgentId::ROOT, a, b]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn random_sequences_preserve_invariants(ops in prop::collection::vec((0u8..4, 0u32..64, 0u32..8, any::<bool>()), 1..200)) {
            let mut t = SearchTree::new(8).unwrap();
            let mut commits = 0u64;
            for (kind, node_sel, task_sel, success) in ops {
                let id = AgentId(node_sel % t.len() as u32);
                match kind {
                    0 => {
                        t.add_child(id).unwrap();
                    }
                    _ => {
                        let task = TaskId(task_sel);
                        if t.node(id).unwrap().remaining_tasks.contains(&task) {
                            t.record_evaluation(id, task, success).unwrap();
                            commits += 1;
                        }
                    }
                }
            }
            t.check_invariants().unwrap();
            let total: u64 = t.nodes().map(|n| n.evaluations()).sum();
            prop_assert_eq!(total, commits);
            if commits > 0 {
                let root_cmp = t.cmp_estimate(AgentId::ROOT).unwrap().unwrap();
                let succ: u64 = t.nodes().map(|n| n.n_success).sum();
                prop_assert!((root_cmp - succ as f64 / commits as f64).abs() < 1e-12);
            }
        }
    }
}
