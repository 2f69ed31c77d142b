//! Block decomposed partial-order plans.
//!
//! The plan stores operator nodes, operator-level causal links, a block tree and
//! one legal execution (every block contiguous). Orderings between siblings are
//! derived: causal links lifted to the level where producer and consumer part
//! ways, and threats resolved in the direction of the stored execution.

mod deorder;
mod layout;

pub use deorder::{block_deorder, DeorderStats};
pub use layout::{Layout, Level, Semantics, Violation};

use crate::fdr::{Fact, FdrTask, OpId, SequentialPlan};
use crate::metrics::PairRatio;
use crate::pop::{CausalLink, NodeId, PartialOrderPlan, PlanNode, PopError, ReasonMap};
pub(crate) use layout::Policy;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct BlockId(pub usize);

pub const ROOT: BlockId = BlockId(0);

/// A child of a block: an operator node or a compound block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    Node(NodeId),
    Block(BlockId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockNode {
    pub parent: Option<BlockId>,
    pub children: Vec<Item>,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BdpoPlan {
    pub(crate) nodes: Vec<PlanNode>,
    pub(crate) alive: Vec<bool>,
    pub(crate) parent: Vec<BlockId>,
    pub(crate) blocks: Vec<BlockNode>,
    pub(crate) links: Vec<CausalLink>,
    pub(crate) pinned: Vec<(Item, Item)>,
    pub(crate) reference: Vec<NodeId>,
    pub(crate) goal: NodeId,
    pub(crate) layout: Layout,
}

impl BdpoPlan {
    /// Wraps a flat plan; every operator becomes a child of the root block.
    pub fn from_pop(pop: &PartialOrderPlan, task: &FdrTask) -> Result<Self, Violation> {
        let order = pop.topological_nodes().map_err(|_| Violation::Cycle(ROOT))?;
        let n = pop.nodes().len();
        let mut plan = BdpoPlan {
            nodes: pop.nodes().to_vec(),
            alive: vec![true; n],
            parent: vec![ROOT; n],
            blocks: vec![BlockNode {
                parent: None,
                children: (0..n).map(|i| Item::Node(NodeId(i))).collect(),
                alive: true,
            }],
            links: pop.links().to_vec(),
            pinned: Vec::new(),
            reference: order,
            goal: pop.goal(),
            layout: Layout::default(),
        };
        // orderings not explained by links and threats are kept verbatim
        plan.layout = plan.derive(task, Policy::Reference)?;
        for &(a, b) in pop.basic_orderings().keys() {
            if !plan.precedes(a, b) {
                plan.pinned.push((Item::Node(a), Item::Node(b)));
            }
        }
        if !plan.pinned.is_empty() {
            plan.layout = plan.derive(task, Policy::Reference)?;
        }
        plan.check(task)?;
        Ok(plan)
    }

    pub fn init(&self) -> NodeId {
        NodeId(0)
    }

    pub fn goal(&self) -> NodeId {
        self.goal
    }

    pub fn node(&self, id: NodeId) -> PlanNode {
        self.nodes[id.0]
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn links(&self) -> &[CausalLink] {
        &self.links
    }

    pub fn reference(&self) -> &[NodeId] {
        &self.reference
    }

    pub fn is_alive(&self, item: Item) -> bool {
        match item {
            Item::Node(n) => self.alive[n.0],
            Item::Block(b) => self.blocks[b.0].alive,
        }
    }

    /// Alive operator nodes in reference order.
    pub fn op_nodes(&self) -> Vec<NodeId> {
        self.reference.iter().copied().filter(|n| self.nodes[n.0].is_op()).collect()
    }

    pub fn num_ops(&self) -> usize {
        self.op_nodes().len()
    }

    pub fn cost(&self, task: &FdrTask) -> u64 {
        self.op_nodes().iter().map(|n| task.cost(self.nodes[n.0].op().unwrap())).sum()
    }

    pub fn children(&self, b: BlockId) -> &[Item] {
        &self.blocks[b.0].children
    }

    pub fn parent_of(&self, item: Item) -> Option<BlockId> {
        match item {
            Item::Node(n) => Some(self.parent[n.0]),
            Item::Block(b) => self.blocks[b.0].parent,
        }
    }

    /// Alive compound blocks other than the root.
    pub fn compound_blocks(&self) -> Vec<BlockId> {
        (1..self.blocks.len()).filter(|&b| self.blocks[b].alive).map(BlockId).collect()
    }

    pub fn members(&self, item: Item) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.collect_members(item, &mut out);
        out
    }

    fn collect_members(&self, item: Item, out: &mut Vec<NodeId>) {
        match item {
            Item::Node(n) => out.push(n),
            Item::Block(b) => {
                for &c in &self.blocks[b.0].children {
                    self.collect_members(c, out);
                }
            }
        }
    }

    /// The item itself followed by its enclosing blocks up to the root.
    pub fn path(&self, item: Item) -> Vec<Item> {
        let mut out = vec![item];
        let mut cur = self.parent_of(item);
        while let Some(b) = cur {
            out.push(Item::Block(b));
            cur = self.blocks[b.0].parent;
        }
        out
    }

    /// Deepest block containing both items, with the children holding each.
    pub fn lca(&self, a: Item, b: Item) -> (BlockId, Item, Item) {
        let pa = self.path(a);
        let pb = self.path(b);
        let set: BTreeSet<Item> = pb.iter().copied().collect();
        for i in 1..pa.len() {
            if set.contains(&pa[i]) {
                let Item::Block(l) = pa[i] else { unreachable!() };
                let j = pb.iter().position(|&x| x == pa[i]).unwrap();
                return (l, pa[i - 1], pb[j - 1]);
            }
        }
        unreachable!("items share the root")
    }

    /// Effective order between two nodes.
    pub fn precedes(&self, a: NodeId, b: NodeId) -> bool {
        self.layout.order.get(a.0, b.0)
    }

    pub fn item_precedes(&self, a: Item, b: Item) -> bool {
        let (l, x, y) = self.lca(a, b);
        self.layout.level(l).is_some_and(|lv| lv.precedes(x, y))
    }

    pub fn unordered(&self, a: NodeId, b: NodeId) -> bool {
        a != b && !self.precedes(a, b) && !self.precedes(b, a)
    }

    pub fn semantics(&self, item: Item) -> &Semantics {
        &self.layout.sem[&item]
    }

    pub fn first_pos(&self, item: Item) -> usize {
        self.layout.first[&item]
    }

    pub fn unordered_op_pairs(&self) -> u64 {
        let ops = self.op_nodes();
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

    /// Number of ordered (a, b) operator pairs; strictly decreases under deordering.
    pub(crate) fn ordered_op_pairs(&self) -> usize {
        let ops = self.op_nodes();
        ops.iter().map(|&a| ops.iter().filter(|&&b| self.precedes(a, b)).count()).sum()
    }

    pub(crate) fn derive(&self, task: &FdrTask, policy: Policy) -> Result<Layout, Violation> {
        layout::derive(self, task, policy)
    }

    /// Re-derives orderings from the stored execution and checks validity.
    pub(crate) fn refresh(&mut self, task: &FdrTask) -> Result<(), Violation> {
        self.layout = self.derive(task, Policy::Reference)?;
        self.check(task)
    }

    /// Sound validity check: every precondition linked from a producer whose
    /// block delivers the fact, and every threat ordered away.
    pub fn check(&self, task: &FdrTask) -> Result<(), Violation> {
        let mut supplied: BTreeMap<(NodeId, Fact), usize> = BTreeMap::new();
        for l in &self.links {
            if !self.alive[l.producer.0] || !self.alive[l.consumer.0] {
                return Err(Violation::BadLink(*l));
            }
            if self.nodes[l.producer.0].writes(task, l.fact.var) != Some(l.fact.val)
                || !self.nodes[l.consumer.0].pre(task).contains(l.fact)
            {
                return Err(Violation::BadLink(*l));
            }
            *supplied.entry((l.consumer, l.fact)).or_default() += 1;
        }
        for &n in &self.reference {
            for f in self.nodes[n.0].pre(task).iter() {
                if supplied.get(&(n, f)).copied().unwrap_or(0) == 0 {
                    return Err(Violation::Unsupported { node: n, fact: f });
                }
            }
        }
        if self.reference.first() != Some(&self.init()) || self.reference.last() != Some(&self.goal) {
            return Err(Violation::Cycle(ROOT));
        }
        Ok(())
    }

    /// Orders children of every block with a topological sort of `before`
    /// lifted to items; ties by smallest `key`. None if some level is cyclic.
    pub(crate) fn legal_reference(&self, before: &dyn Fn(NodeId, NodeId) -> bool, key: &dyn Fn(NodeId) -> usize) -> Option<Vec<NodeId>> {
        let mut out = Vec::new();
        self.order_block(ROOT, before, key, &mut out)?;
        Some(out)
    }

    fn order_block(
        &self,
        b: BlockId,
        before: &dyn Fn(NodeId, NodeId) -> bool,
        key: &dyn Fn(NodeId) -> usize,
        out: &mut Vec<NodeId>,
    ) -> Option<()> {
        let children = &self.blocks[b.0].children;
        let members: Vec<Vec<NodeId>> = children.iter().map(|&c| self.members(c)).collect();
        let k = children.len();
        let mut succ = vec![Vec::new(); k];
        let mut indeg = vec![0usize; k];
        for i in 0..k {
            for j in 0..k {
                if i != j && members[i].iter().any(|&a| members[j].iter().any(|&c| before(a, c))) {
                    succ[i].push(j);
                    indeg[j] += 1;
                }
            }
        }
        let keys: Vec<usize> = members.iter().map(|m| m.iter().map(|&n| key(n)).min().unwrap_or(usize::MAX)).collect();
        let mut ready: BTreeSet<(usize, usize)> = (0..k).filter(|&i| indeg[i] == 0).map(|i| (keys[i], i)).collect();
        let mut done = 0;
        while let Some((_, i)) = ready.pop_first() {
            done += 1;
            match children[i] {
                Item::Node(n) => out.push(n),
                Item::Block(c) => self.order_block(c, before, key, out)?,
            }
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert((keys[j], j));
                }
            }
        }
        (done == k).then_some(())
    }

    /// Adds a compound block grouping sibling `items` of `parent`.
    pub(crate) fn add_block(&mut self, parent: BlockId, items: &[Item]) -> BlockId {
        let id = BlockId(self.blocks.len());
        let set: BTreeSet<Item> = items.iter().copied().collect();
        let pchildren = &mut self.blocks[parent.0].children;
        let at = pchildren.iter().position(|c| set.contains(c)).expect("items are children");
        pchildren.retain(|c| !set.contains(c));
        pchildren.insert(at.min(pchildren.len()), Item::Block(id));
        let children: Vec<Item> = items.to_vec();
        for &c in &children {
            match c {
                Item::Node(n) => self.parent[n.0] = id,
                Item::Block(b) => self.blocks[b.0].parent = Some(id),
            }
        }
        self.blocks.push(BlockNode { parent: Some(parent), children, alive: true });
        id
    }

    /// Wraps sibling items into a new block, keeping the current order.
    /// Fails without changes if the result is not a valid plan or would order
    /// previously unordered operators.
    pub fn group(&mut self, task: &FdrTask, items: &[Item]) -> Result<Item, Violation> {
        let parents: BTreeSet<Option<BlockId>> = items.iter().map(|&i| self.parent_of(i)).collect();
        let (Some(Some(parent)), 1) = (parents.iter().next().copied(), parents.len()) else {
            return Err(Violation::NotSiblings);
        };
        if items.len() < 2 {
            return Err(Violation::NotSiblings);
        }
        let mut next = self.clone();
        let b = next.add_block(parent, items);
        let r = next
            .legal_reference(&|a, c| self.precedes(a, c), &|n| self.layout.pos(n))
            .ok_or(Violation::Cycle(parent))?;
        next.reference = r;
        next.refresh(task)?;
        let ops = self.op_nodes();
        if ops.iter().any(|&a| ops.iter().any(|&c| next.precedes(a, c) && !self.precedes(a, c))) {
            return Err(Violation::NotConvex);
        }
        *self = next;
        Ok(Item::Block(b))
    }

    /// Removes single-child compound blocks, lifting their child.
    pub fn dissolve_singletons(&mut self, task: &FdrTask) -> Result<(), Violation> {
        let mut changed = false;
        for b in 1..self.blocks.len() {
            if !self.blocks[b].alive || self.blocks[b].children.len() != 1 {
                continue;
            }
            let child = self.blocks[b].children[0];
            let parent = self.blocks[b].parent.unwrap();
            let pch = &mut self.blocks[parent.0].children;
            let at = pch.iter().position(|&c| c == Item::Block(BlockId(b))).unwrap();
            pch[at] = child;
            match child {
                Item::Node(n) => self.parent[n.0] = parent,
                Item::Block(c) => self.blocks[c.0].parent = Some(parent),
            }
            self.blocks[b].alive = false;
            self.blocks[b].children.clear();
            self.remap_pinned(Item::Block(BlockId(b)), Some(child));
            changed = true;
        }
        if changed {
            self.refresh(task)?;
        }
        Ok(())
    }

    pub(crate) fn remap_pinned(&mut self, from: Item, to: Option<Item>) {
        let mut out = Vec::new();
        for &(a, b) in &self.pinned {
            let a2 = if a == from { to } else { Some(a) };
            let b2 = if b == from { to } else { Some(b) };
            if let (Some(a2), Some(b2)) = (a2, b2) {
                out.push((a2, b2));
            }
        }
        self.pinned = out;
    }

    /// Flattens to an operator-level plan with the effective ordering.
    pub fn expand(&self) -> PartialOrderPlan {
        let order = &self.reference;
        let index: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let nodes: Vec<PlanNode> = order.iter().map(|&n| self.nodes[n.0]).collect();
        let links = self
            .links
            .iter()
            .map(|l| CausalLink { producer: NodeId(index[&l.producer]), consumer: NodeId(index[&l.consumer]), fact: l.fact })
            .collect();
        let mut edges = ReasonMap::new();
        for (i, &a) in order.iter().enumerate() {
            for (j, &b) in order.iter().enumerate() {
                if self.precedes(a, b) {
                    let (l, x, y) = self.lca(Item::Node(a), Item::Node(b));
                    let reasons = self.layout.level(l).and_then(|lv| lv.reasons(x, y)).cloned().unwrap_or_default();
                    edges.insert((NodeId(i), NodeId(j)), reasons);
                }
            }
        }
        PartialOrderPlan::from_parts(nodes, links, edges)
    }

    /// One legal execution as a sequential plan.
    pub fn witness(&self) -> SequentialPlan {
        SequentialPlan {
            steps: self
                .reference
                .iter()
                .filter_map(|&n| match self.nodes[n.0] {
                    PlanNode::Op { op, instance } => Some(crate::fdr::PlanStep { instance, op }),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn op_of(&self, n: NodeId) -> Option<OpId> {
        self.nodes[n.0].op()
    }

    /// Direct (basic) orderings between siblings of `b`, with reasons.
    pub fn basic_orderings(&self, b: BlockId) -> Vec<(Item, Item, BTreeSet<crate::pop::OrderingReason>)> {
        let Some(level) = self.layout.level(b) else { return Vec::new() };
        level.basic().into_iter().map(|(x, y)| (x, y, level.reasons(x, y).cloned().unwrap_or_default())).collect()
    }

    /// Alive blocks in post-order (children first), root last.
    pub(crate) fn post_order(&self) -> Vec<BlockId> {
        fn rec(p: &BdpoPlan, b: BlockId, out: &mut Vec<BlockId>) {
            for &c in &p.blocks[b.0].children {
                if let Item::Block(cb) = c {
                    rec(p, cb, out);
                }
            }
            out.push(b);
        }
        let mut out = Vec::new();
        rec(self, ROOT, &mut out);
        out
    }

    /// All legal executions (blocks contiguous), or None once more than `cap` exist.
    pub fn legal_executions(&self, cap: usize) -> Option<Vec<Vec<NodeId>>> {
        self.block_executions(ROOT, cap)
    }

    fn block_executions(&self, b: BlockId, cap: usize) -> Option<Vec<Vec<NodeId>>> {
        let level = self.layout.level(b)?;
        let children = level.children();
        let mut pieces: BTreeMap<Item, Vec<Vec<NodeId>>> = BTreeMap::new();
        for &c in children {
            let p = match c {
                Item::Node(n) => vec![vec![n]],
                Item::Block(cb) => self.block_executions(cb, cap)?,
            };
            pieces.insert(c, p);
        }
        let mut out = Vec::new();
        let mut stack: Vec<(Vec<Item>, Vec<NodeId>)> = vec![(Vec::new(), Vec::new())];
        while let Some((used, prefix)) = stack.pop() {
            if used.len() == children.len() {
                out.push(prefix);
                if out.len() > cap {
                    return None;
                }
                continue;
            }
            for &c in children.iter().rev() {
                if used.contains(&c) || children.iter().any(|&d| !used.contains(&d) && d != c && level.precedes(d, c)) {
                    continue;
                }
                for piece in &pieces[&c] {
                    let mut u = used.clone();
                    u.push(c);
                    let mut p = prefix.clone();
                    p.extend(piece);
                    stack.push((u, p));
                }
                if stack.len() > cap.saturating_mul(64).max(1024) {
                    return None;
                }
            }
        }
        Some(out)
    }

    pub fn item_label(&self, task: &FdrTask, item: Item) -> String {
        match item {
            Item::Node(n) => self.nodes[n.0].label(task),
            Item::Block(b) => format!("block{}", b.0),
        }
    }
}
