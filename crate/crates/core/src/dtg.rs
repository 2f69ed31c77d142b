//! Domain transition graphs and block extension ahead of substitution.

use crate::block::{BdpoPlan, BlockId, Item};
use crate::concurrency::{op_conflict_vars, PbdPlan};
use crate::fdr::{FdrTask, OpId, State, VarId};
use crate::pop::NodeId;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

/// Value transitions of one variable, labelled with operators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainTransitionGraph {
    pub var: VarId,
    /// adjacency[d] = (d', op)
    pub adjacency: Vec<Vec<(usize, OpId)>>,
}

pub fn build_dtg(task: &FdrTask, v: VarId) -> DomainTransitionGraph {
    let n = task.domain_size(v);
    let mut adjacency = vec![Vec::new(); n];
    for (i, op) in task.operators.iter().enumerate() {
        let Some(post) = op.eff.get(v) else { continue };
        match op.pre.get(v) {
            Some(d) => adjacency[d].push((post, OpId(i))),
            None => {
                for (d, adj) in adjacency.iter_mut().enumerate() {
                    if d != post {
                        adj.push((post, OpId(i)));
                    }
                }
            }
        }
    }
    DomainTransitionGraph { var: v, adjacency }
}

impl DomainTransitionGraph {
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, OpId)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(d, adj)| adj.iter().map(move |&(e, o)| (d, e, o)))
    }

    /// Whether `to` is reachable from `from` using only allowed operators.
    pub fn safe_transition_exists(&self, from: usize, to: usize, allowed: impl Fn(OpId) -> bool) -> bool {
        let mut seen = vec![false; self.adjacency.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(d) = queue.pop_front() {
            if d == to {
                return true;
            }
            for &(e, o) in &self.adjacency[d] {
                if !seen[e] && allowed(o) {
                    seen[e] = true;
                    queue.push_back(e);
                }
            }
        }
        false
    }

    pub fn to_dot(&self, task: &FdrTask) -> String {
        let var = &task.variables[self.var.0];
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", escape(&var.name));
        for (d, name) in var.values.iter().enumerate() {
            let _ = writeln!(s, "  d{d} [label=\"{}\"];", escape(name));
        }
        for (d, e, o) in self.edges() {
            let _ = writeln!(s, "  d{d} -> d{e} [label=\"{}\"];", escape(&task.op(o).name));
        }
        s.push_str("}\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtendError {
    #[error("items are not siblings in the block tree")]
    NotSiblings,
    #[error("predecessors of the block do not execute from the initial state")]
    CorruptPredecessors,
}

/// Result of growing a block: the sibling items that form the grown block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Extension {
    pub level: BlockId,
    pub items: Vec<Item>,
    pub absorbed: Vec<Item>,
    /// Conflict variables of the original pair; informational only.
    pub cvars: BTreeSet<VarId>,
    pub passes: usize,
}

/// Nodes ordered before some member of `items`, in reference order. The
/// items run as one unit, so all of these execute before any of them.
pub(crate) fn predecessor_nodes(plan: &BdpoPlan, items: &[Item]) -> Vec<NodeId> {
    let inside: BTreeSet<NodeId> = items.iter().flat_map(|&i| plan.members(i)).collect();
    plan.reference()
        .iter()
        .copied()
        .filter(|n| !inside.contains(n) && inside.iter().any(|&m| plan.precedes(*n, m)))
        .collect()
}

/// State reached by running the predecessors of `items` from the initial state.
pub(crate) fn predecessor_state(plan: &BdpoPlan, task: &FdrTask, items: &[Item]) -> Result<State, ExtendError> {
    let mut s = task.init.clone();
    for n in predecessor_nodes(plan, items) {
        if let Some(o) = plan.op_of(n) {
            s = task.apply(o, &s).map_err(|_| ExtendError::CorruptPredecessors)?;
        }
    }
    Ok(s)
}

/// Grows `b_i` with neighbouring siblings whose supplied values cannot be
/// re-achieved without operators conflicting with `b_j`.
pub fn extend(task: &FdrTask, pbd: &PbdPlan, b_i: Item, b_j: Item) -> Result<Extension, ExtendError> {
    let plan = &pbd.plan;
    let level_id = plan.parent_of(b_i).ok_or(ExtendError::NotSiblings)?;
    let level = plan.layout().level(level_id).ok_or(ExtendError::NotSiblings)?;
    let cvars = pbd.block_conflict_vars(b_i, b_j).unwrap_or_default();
    let j_ops: Vec<OpId> = plan.members(b_j).iter().filter_map(|&n| plan.op_of(n)).collect();
    let allowed: Vec<bool> = task
        .operators
        .iter()
        .map(|o| j_ops.iter().all(|&p| op_conflict_vars(o, task.op(p)).is_empty()))
        .collect();
    let fixed = [Item::Node(plan.init()), Item::Node(plan.goal())];
    let mut dtgs: BTreeMap<VarId, DomainTransitionGraph> = BTreeMap::new();

    let mut set: BTreeSet<Item> = BTreeSet::from([b_i]);
    let mut absorbed = Vec::new();
    let mut passes = 0;
    loop {
        passes += 1;
        let items: Vec<Item> = set.iter().copied().collect();
        let inside: BTreeSet<NodeId> = items.iter().flat_map(|&i| plan.members(i)).collect();
        let s = predecessor_state(plan, task, &items)?;
        let supplied: BTreeMap<VarId, usize> = plan
            .links()
            .iter()
            .filter(|l| inside.contains(&l.producer) && !inside.contains(&l.consumer))
            .map(|l| (l.fact.var, l.fact.val))
            .collect();
        let ch = level.children();
        let (preds, succs) = level.set_neighbours(&set);
        let mut grow: BTreeSet<Item> = BTreeSet::new();
        let mut safe = |v: VarId, from: usize, to: usize| {
            dtgs.entry(v)
                .or_insert_with(|| build_dtg(task, v))
                .safe_transition_exists(from, to, |o| allowed[o.0])
        };
        for &b in &preds {
            if fixed.contains(&b) || level.precedes(b, b_j) || b == b_j {
                continue;
            }
            let mb: BTreeSet<NodeId> = plan.members(b).into_iter().collect();
            for l in plan.links() {
                if !mb.contains(&l.producer) || !inside.contains(&l.consumer) {
                    continue;
                }
                let Some(&target) = supplied.get(&l.fact.var) else { continue };
                if !safe(l.fact.var, l.fact.val, target) {
                    grow.insert(b);
                }
            }
        }
        if grow.is_empty() {
            for &b in &succs {
                if fixed.contains(&b) || level.precedes(b_j, b) || b == b_j {
                    continue;
                }
                let mb: BTreeSet<NodeId> = plan.members(b).into_iter().collect();
                for l in plan.links() {
                    if !inside.contains(&l.producer) || !mb.contains(&l.consumer) {
                        continue;
                    }
                    if !safe(l.fact.var, s.get(l.fact.var), l.fact.val) {
                        grow.insert(b);
                    }
                }
            }
        }
        if grow.is_empty() {
            break;
        }
        let union: BTreeSet<Item> = set.union(&grow).copied().collect();
        let hull: BTreeSet<Item> = ch
            .iter()
            .copied()
            .filter(|&z| {
                union.iter().any(|&a| a == z || level.precedes(a, z)) && union.iter().any(|&c| c == z || level.precedes(z, c))
            })
            .collect();
        if hull.contains(&b_j) || hull.iter().any(|i| fixed.contains(i)) {
            break;
        }
        absorbed.extend(hull.difference(&set).copied());
        set = hull;
    }
    let mut items: Vec<Item> = set.into_iter().collect();
    items.sort_by_key(|&i| plan.first_pos(i));
    absorbed.sort_by_key(|&i| plan.first_pos(i));
    Ok(Extension { level: level_id, items, absorbed, cvars, passes })
}
