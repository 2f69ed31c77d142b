//! Partial-order plans with causal links and labelled ordering reasons.

mod eog;

pub use eog::eog;

use crate::bits::BitMatrix;
use crate::fdr::{Fact, FdrTask, OpId, PartialState, PlanStep, SequentialPlan};
use crate::metrics::{PairRatio, UndefinedMetric};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanNode {
    Init,
    Goal,
    Op { op: OpId, instance: usize },
}

impl PlanNode {
    pub fn op(&self) -> Option<OpId> {
        match self {
            PlanNode::Op { op, .. } => Some(*op),
            _ => None,
        }
    }

    pub fn is_op(&self) -> bool {
        matches!(self, PlanNode::Op { .. })
    }

    pub fn pre<'t>(&self, task: &'t FdrTask) -> std::borrow::Cow<'t, PartialState> {
        use std::borrow::Cow;
        match self {
            PlanNode::Init => Cow::Owned(PartialState::new()),
            PlanNode::Goal => Cow::Borrowed(&task.goal),
            PlanNode::Op { op, .. } => Cow::Borrowed(&task.op(*op).pre),
        }
    }

    pub fn eff<'t>(&self, task: &'t FdrTask) -> std::borrow::Cow<'t, PartialState> {
        use std::borrow::Cow;
        match self {
            PlanNode::Init => Cow::Owned(PartialState::from_facts(task.init.facts())),
            PlanNode::Goal => Cow::Owned(PartialState::new()),
            PlanNode::Op { op, .. } => Cow::Borrowed(&task.op(*op).eff),
        }
    }

    /// Value written to `var`, if any.
    pub fn writes(&self, task: &FdrTask, var: crate::fdr::VarId) -> Option<usize> {
        match self {
            PlanNode::Init => Some(task.init.get(var)),
            PlanNode::Goal => None,
            PlanNode::Op { op, .. } => task.op(*op).eff.get(var),
        }
    }

    pub fn deletes(&self, task: &FdrTask, fact: Fact) -> bool {
        match self {
            PlanNode::Init => task.init.get(fact.var) != fact.val,
            PlanNode::Goal => false,
            PlanNode::Op { op, .. } => task.deletes(*op, fact),
        }
    }

    pub fn label(&self, task: &FdrTask) -> String {
        match self {
            PlanNode::Init => "INIT".into(),
            PlanNode::Goal => "GOAL".into(),
            PlanNode::Op { op, .. } => task.op(*op).name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CausalLink {
    pub producer: NodeId,
    pub consumer: NodeId,
    pub fact: Fact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ReasonKind {
    PC,
    CD,
    DP,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct OrderingReason {
    pub kind: ReasonKind,
    pub fact: Fact,
}

impl OrderingReason {
    pub fn pc(fact: Fact) -> Self {
        OrderingReason { kind: ReasonKind::PC, fact }
    }
    pub fn cd(fact: Fact) -> Self {
        OrderingReason { kind: ReasonKind::CD, fact }
    }
    pub fn dp(fact: Fact) -> Self {
        OrderingReason { kind: ReasonKind::DP, fact }
    }
}

pub type ReasonMap = BTreeMap<(NodeId, NodeId), BTreeSet<OrderingReason>>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PopError {
    #[error("ordering relation contains a cycle")]
    Cycle,
    #[error("input plan is not valid: {0}")]
    InvalidPlan(String),
    #[error("ordering {0:?} -> {1:?} has no derivable reason")]
    MissingReason(NodeId, NodeId),
    #[error(transparent)]
    Metric(#[from] UndefinedMetric),
}

/// Operator nodes plus INIT (first) and GOAL (last), ordered by a transitively
/// closed relation. `edges` keeps every explicitly derived edge with its reasons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialOrderPlan {
    pub(crate) nodes: Vec<PlanNode>,
    pub(crate) links: Vec<CausalLink>,
    pub(crate) edges: ReasonMap,
    pub(crate) closure: BitMatrix,
}

impl PartialOrderPlan {
    /// Builds a plan from explicit edges; closes them transitively.
    pub fn from_parts(nodes: Vec<PlanNode>, links: Vec<CausalLink>, edges: ReasonMap) -> Self {
        let mut closure = BitMatrix::new(nodes.len());
        for &(a, b) in edges.keys() {
            closure.set(a.0, b.0);
        }
        closure.close();
        PartialOrderPlan { nodes, links, edges, closure }
    }

    pub fn init(&self) -> NodeId {
        NodeId(0)
    }

    pub fn goal(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[PlanNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> PlanNode {
        self.nodes[id.0]
    }

    pub fn links(&self) -> &[CausalLink] {
        &self.links
    }

    pub fn edges(&self) -> &ReasonMap {
        &self.edges
    }

    pub fn op_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_op()).map(NodeId)
    }

    pub fn num_ops(&self) -> usize {
        self.op_nodes().count()
    }

    pub fn precedes(&self, a: NodeId, b: NodeId) -> bool {
        self.closure.get(a.0, b.0)
    }

    pub fn unordered(&self, a: NodeId, b: NodeId) -> bool {
        a != b && !self.precedes(a, b) && !self.precedes(b, a)
    }

    pub fn is_acyclic(&self) -> bool {
        !self.closure.has_cycle()
    }

    /// Adds an ordering with an optional reason and updates the closure.
    pub fn add_ordering(&mut self, a: NodeId, b: NodeId, reason: Option<OrderingReason>) {
        let entry = self.edges.entry((a, b)).or_default();
        if let Some(r) = reason {
            entry.insert(r);
        }
        self.closure.add_closed(a.0, b.0);
    }

    /// Removes an explicit edge and recomputes the closure.
    pub fn remove_ordering(&mut self, a: NodeId, b: NodeId) {
        self.edges.remove(&(a, b));
        let mut closure = BitMatrix::new(self.nodes.len());
        for &(x, y) in self.edges.keys() {
            closure.set(x.0, y.0);
        }
        closure.close();
        self.closure = closure;
    }

    /// Orderings not implied by transitivity, with their stored reasons.
    pub fn basic_orderings(&self) -> ReasonMap {
        let n = self.nodes.len();
        let mut out = ReasonMap::new();
        for a in 0..n {
            for b in self.closure.row(a) {
                let implied = (0..n).any(|c| c != a && c != b && self.closure.get(a, c) && self.closure.get(c, b));
                if !implied {
                    let reasons = self.edges.get(&(NodeId(a), NodeId(b))).cloned().unwrap_or_default();
                    out.insert((NodeId(a), NodeId(b)), reasons);
                }
            }
        }
        out
    }

    /// Recomputes ordering reasons for every basic ordering from plan semantics.
    pub fn annotate_reasons(&self, task: &FdrTask) -> Result<ReasonMap, PopError> {
        let mut out = ReasonMap::new();
        for (a, b) in self.basic_orderings().into_keys() {
            let na = self.node(a);
            let nb = self.node(b);
            let mut rs = BTreeSet::new();
            for l in &self.links {
                if l.producer == a && l.consumer == b {
                    rs.insert(OrderingReason::pc(l.fact));
                }
                if l.producer == b && na.deletes(task, l.fact) {
                    rs.insert(OrderingReason::dp(l.fact));
                }
            }
            for f in na.pre(task).iter() {
                if nb.deletes(task, f) {
                    rs.insert(OrderingReason::cd(f));
                }
            }
            let framing = !na.is_op() || !nb.is_op();
            if rs.is_empty() && !framing {
                return Err(PopError::MissingReason(a, b));
            }
            out.insert((a, b), rs);
        }
        Ok(out)
    }

    /// Every linearization is a valid plan.
    ///
    /// Decided per precondition by asking which writers of its variable can be
    /// the last one executed before the consumer in some linearization.
    pub fn is_valid(&self, task: &FdrTask) -> bool {
        if !self.is_acyclic() {
            return false;
        }
        let n = self.nodes.len();
        for c in 0..n {
            let pre = self.nodes[c].pre(task);
            for f in pre.iter() {
                let writers: Vec<usize> = (0..n)
                    .filter(|&w| w != c && self.nodes[w].writes(task, f.var).is_some())
                    .collect();
                for &w in &writers {
                    if self.closure.get(c, w) {
                        continue;
                    }
                    let shadowed = writers
                        .iter()
                        .any(|&x| x != w && self.closure.get(w, x) && self.closure.get(x, c));
                    if !shadowed && self.nodes[w].writes(task, f.var) != Some(f.val) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Topological order, ties broken by node index (original position).
    pub fn linearize(&self) -> Result<SequentialPlan, PopError> {
        let order = self.topological_nodes()?;
        let steps = order
            .into_iter()
            .filter_map(|id| match self.nodes[id.0] {
                PlanNode::Op { op, instance } => Some(PlanStep { instance, op }),
                _ => None,
            })
            .collect();
        Ok(SequentialPlan { steps })
    }

    pub(crate) fn topological_nodes(&self) -> Result<Vec<NodeId>, PopError> {
        if !self.is_acyclic() {
            return Err(PopError::Cycle);
        }
        let n = self.nodes.len();
        let basic = self.basic_orderings();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in basic.keys() {
            indeg[b.0] += 1;
            succ[a.0].push(b.0);
        }
        let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(Reverse(i)) = heap.pop() {
            out.push(NodeId(i));
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    heap.push(Reverse(j));
                }
            }
        }
        Ok(out)
    }

    pub fn unordered_op_pairs(&self) -> u64 {
        let ops: Vec<NodeId> = self.op_nodes().collect();
        let mut count = 0;
        for (i, &a) in ops.iter().enumerate() {
            for &b in &ops[i + 1..] {
                if self.unordered(a, b) {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn flex(&self) -> Result<PairRatio, PopError> {
        Ok(PairRatio::of_pairs(self.unordered_op_pairs(), self.num_ops())?)
    }
}

/// Total order over a sequential plan: every step ordered after the previous one.
pub fn total_order(plan: &SequentialPlan) -> PartialOrderPlan {
    let mut nodes = vec![PlanNode::Init];
    nodes.extend(plan.steps.iter().map(|s| PlanNode::Op { op: s.op, instance: s.instance }));
    nodes.push(PlanNode::Goal);
    let mut edges = ReasonMap::new();
    for i in 0..nodes.len() - 1 {
        edges.insert((NodeId(i), NodeId(i + 1)), BTreeSet::new());
    }
    PartialOrderPlan::from_parts(nodes, Vec::new(), edges)
}
