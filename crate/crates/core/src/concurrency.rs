//! Non-concurrency between operators and blocks, and concurrent flexibility.

use crate::block::{BdpoPlan, BlockId, Item};
use crate::fdr::{FdrTask, Operator, VarId};
use crate::metrics::PairRatio;
use crate::pop::{NodeId, PopError};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Variables on which two operators cannot run simultaneously.
///
/// A variable conflicts when both operators mention it and they disagree on
/// preconditions, on effects, or one's precondition against the other's effect.
pub fn op_conflict_vars(a: &Operator, b: &Operator) -> BTreeSet<VarId> {
    let mut out = BTreeSet::new();
    let differ = |x: Option<usize>, y: Option<usize>| matches!((x, y), (Some(x), Some(y)) if x != y);
    let vars: BTreeSet<VarId> = a.pre.vars().chain(a.eff.vars()).chain(b.pre.vars()).chain(b.eff.vars()).collect();
    for v in vars {
        if differ(a.pre.get(v), b.pre.get(v))
            || differ(a.eff.get(v), b.eff.get(v))
            || differ(a.pre.get(v), b.eff.get(v))
            || differ(b.pre.get(v), a.eff.get(v))
        {
            out.insert(v);
        }
    }
    out
}

/// Symmetric, irreflexive relation over operator nodes with conflict variables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NonConcurrencyRelation {
    pairs: BTreeMap<(NodeId, NodeId), BTreeSet<VarId>>,
}

impl NonConcurrencyRelation {
    pub fn compute(plan: &BdpoPlan, task: &FdrTask) -> Self {
        let ops = plan.op_nodes();
        let mut pairs = BTreeMap::new();
        for (i, &a) in ops.iter().enumerate() {
            for &b in &ops[i + 1..] {
                let vars = op_conflict_vars(task.op(plan.op_of(a).unwrap()), task.op(plan.op_of(b).unwrap()));
                if !vars.is_empty() {
                    pairs.insert(key(a, b), vars);
                }
            }
        }
        NonConcurrencyRelation { pairs }
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<&BTreeSet<VarId>> {
        self.pairs.get(&key(a, b))
    }

    pub fn contains(&self, a: NodeId, b: NodeId) -> bool {
        self.pairs.contains_key(&key(a, b))
    }

    pub fn remove(&mut self, a: NodeId, b: NodeId) -> Option<BTreeSet<VarId>> {
        self.pairs.remove(&key(a, b))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId, &BTreeSet<VarId>)> {
        self.pairs.iter().map(|(&(a, b), v)| (a, b, v))
    }
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("items {0:?} and {1:?} overlap")]
pub struct OverlapError(pub Item, pub Item);

/// A necessarily non-concurrent pair of unordered siblings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NecessaryPair {
    pub level: BlockId,
    /// Earlier of the two in the reference execution.
    pub first: Item,
    pub second: Item,
    pub vars: BTreeSet<VarId>,
}

/// Block plan plus its non-concurrency relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PbdPlan {
    pub plan: BdpoPlan,
    pub relation: NonConcurrencyRelation,
}

impl PbdPlan {
    pub fn new(plan: BdpoPlan, task: &FdrTask) -> Self {
        let relation = NonConcurrencyRelation::compute(&plan, task);
        PbdPlan { plan, relation }
    }

    /// Union of operator conflicts across the two items.
    pub fn block_conflict_vars(&self, x: Item, y: Item) -> Result<BTreeSet<VarId>, OverlapError> {
        let mx = self.plan.members(x);
        let my = self.plan.members(y);
        if mx.iter().any(|m| my.contains(m)) {
            return Err(OverlapError(x, y));
        }
        let mut out = BTreeSet::new();
        for &a in &mx {
            for &b in &my {
                if let Some(v) = self.relation.get(a, b) {
                    out.extend(v.iter().copied());
                }
            }
        }
        Ok(out)
    }

    fn items_conflict(&self, x: Item, y: Item) -> bool {
        let mx = self.plan.members(x);
        let my = self.plan.members(y);
        mx.iter().any(|&a| my.iter().any(|&b| self.relation.contains(a, b)))
    }

    /// Unordered, conflicting siblings, ordered by position of the earlier one.
    pub fn necessary_nonconcurrency(&self) -> Vec<NecessaryPair> {
        let mut out = Vec::new();
        let skip = [Item::Node(self.plan.init()), Item::Node(self.plan.goal())];
        for b in std::iter::once(crate::block::ROOT).chain(self.plan.compound_blocks()) {
            let Some(level) = self.plan.layout().level(b) else { continue };
            let ch = level.children();
            for (i, &x) in ch.iter().enumerate() {
                for &y in &ch[i + 1..] {
                    if skip.contains(&x) || skip.contains(&y) || level.precedes(x, y) || level.precedes(y, x) {
                        continue;
                    }
                    let vars = self.block_conflict_vars(x, y).expect("siblings are disjoint");
                    if !vars.is_empty() {
                        let (first, second) = if self.plan.first_pos(x) <= self.plan.first_pos(y) { (x, y) } else { (y, x) };
                        out.push(NecessaryPair { level: b, first, second, vars });
                    }
                }
            }
        }
        out.sort_by_key(|p| (self.plan.first_pos(p.first), self.plan.first_pos(p.second)));
        out
    }

    /// Operator pairs that may run simultaneously: unordered, and the
    /// children of their common block do not conflict.
    pub fn concurrent_op_pairs(&self) -> u64 {
        let ops = self.plan.op_nodes();
        let mut memo: BTreeMap<(Item, Item), bool> = BTreeMap::new();
        let mut count = 0;
        for (i, &a) in ops.iter().enumerate() {
            for &b in &ops[i + 1..] {
                if !self.plan.unordered(a, b) {
                    continue;
                }
                let (_, x, y) = self.plan.lca(Item::Node(a), Item::Node(b));
                let conflict = *memo.entry((x, y)).or_insert_with(|| self.items_conflict(x, y));
                if !conflict {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn cflex(&self) -> Result<PairRatio, PopError> {
        Ok(PairRatio::of_pairs(self.concurrent_op_pairs(), self.plan.num_ops())?)
    }

    pub fn flex(&self) -> Result<PairRatio, PopError> {
        self.plan.flex()
    }

    pub fn are_concurrent(&self, a: NodeId, b: NodeId) -> bool {
        if !self.plan.unordered(a, b) {
            return false;
        }
        let (_, x, y) = self.plan.lca(Item::Node(a), Item::Node(b));
        !self.items_conflict(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("plan exceeds the oracle bound of {0} operators or executions")]
pub struct OracleSkipped(pub usize);

/// Executable check of the relation: in every state reached along a legal
/// execution, any two pending concurrent operators that are both applicable
/// commute, and every legal execution reaches the goal.
pub fn parallel_soundness_oracle(pbd: &PbdPlan, task: &FdrTask, bound: usize) -> Result<bool, OracleSkipped> {
    let plan = &pbd.plan;
    if plan.num_ops() > bound {
        return Err(OracleSkipped(bound));
    }
    let execs = plan.legal_executions(100_000).ok_or(OracleSkipped(bound))?;
    for ex in execs {
        let ops: Vec<NodeId> = ex.iter().copied().filter(|&n| plan.op_of(n).is_some()).collect();
        let mut state = task.init.clone();
        for (i, &n) in ops.iter().enumerate() {
            let pending = &ops[i..];
            for (j, &a) in pending.iter().enumerate() {
                for &b in &pending[j + 1..] {
                    if !pbd.are_concurrent(a, b) {
                        continue;
                    }
                    let (oa, ob) = (plan.op_of(a).unwrap(), plan.op_of(b).unwrap());
                    if !task.is_applicable(oa, &state) || !task.is_applicable(ob, &state) {
                        continue;
                    }
                    let ab = task.apply(oa, &state).ok().and_then(|s| task.apply(ob, &s).ok());
                    let ba = task.apply(ob, &state).ok().and_then(|s| task.apply(oa, &s).ok());
                    if ab.is_none() || ab != ba {
                        return Ok(false);
                    }
                }
            }
            match task.apply(plan.op_of(n).unwrap(), &state) {
                Ok(s) => state = s,
                Err(_) => return Ok(false),
            }
        }
        if !task.goal.holds_in(&state) {
            return Ok(false);
        }
    }
    Ok(true)
}
