use super::{BdpoPlan, BlockId, Item, ROOT};
use crate::bits::BitMatrix;
use crate::fdr::{Fact, FdrTask, VarId};
use crate::pop::{CausalLink, NodeId, OrderingReason, PlanNode};
use std::collections::{BTreeMap, BTreeSet};

/// Precondition, effects and derived fact sets of an item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Semantics {
    pub pre: BTreeSet<Fact>,
    /// A block may leave a variable with one of several values.
    pub eff: BTreeMap<VarId, BTreeSet<usize>>,
    pub prod: BTreeSet<Fact>,
    pub del: BTreeSet<Fact>,
}

impl Semantics {
    pub fn consumes(&self, f: Fact) -> bool {
        self.pre.contains(&f)
    }

    pub fn produces(&self, f: Fact) -> bool {
        self.prod.contains(&f)
    }

    pub fn deletes(&self, f: Fact) -> bool {
        self.del.contains(&f)
    }

    pub fn writes(&self, v: VarId) -> bool {
        self.eff.contains_key(&v)
    }

    pub fn final_value(&self, v: VarId) -> Option<usize> {
        match self.eff.get(&v) {
            Some(vals) if vals.len() == 1 => vals.iter().next().copied(),
            _ => None,
        }
    }

    pub fn eff_facts(&self) -> impl Iterator<Item = Fact> + '_ {
        self.eff.iter().flat_map(|(&v, ds)| ds.iter().map(move |&d| Fact { var: v, val: d }))
    }

    pub fn pre_vars(&self) -> BTreeSet<VarId> {
        self.pre.iter().map(|f| f.var).collect()
    }

    fn primitive(task: &FdrTask, node: PlanNode) -> Self {
        let pre: BTreeSet<Fact> = node.pre(task).iter().collect();
        let eff_ps = node.eff(task);
        let mut eff: BTreeMap<VarId, BTreeSet<usize>> = BTreeMap::new();
        for f in eff_ps.iter() {
            eff.entry(f.var).or_default().insert(f.val);
        }
        let prod = eff_ps.iter().collect();
        let mut del = BTreeSet::new();
        for f in eff_ps.iter() {
            for d in 0..task.domain_size(f.var) {
                let g = Fact { var: f.var, val: d };
                if node.deletes(task, g) {
                    del.insert(g);
                }
            }
        }
        Semantics { pre, eff, prod, del }
    }

    fn block(task: &FdrTask, plan: &BdpoPlan, members: &[NodeId], order: &BitMatrix) -> Self {
        let inside: BTreeSet<NodeId> = members.iter().copied().collect();
        let mut pre = BTreeSet::new();
        for &m in members {
            for f in plan.nodes[m.0].pre(task).iter() {
                let internal = plan
                    .links
                    .iter()
                    .any(|l| l.consumer == m && l.fact == f && inside.contains(&l.producer));
                if !internal {
                    pre.insert(f);
                }
            }
        }
        let mut eff: BTreeMap<VarId, BTreeSet<usize>> = BTreeMap::new();
        for &m in members {
            for f in plan.nodes[m.0].eff(task).iter() {
                let overwritten = members
                    .iter()
                    .any(|&o| o != m && order.get(m.0, o.0) && plan.nodes[o.0].writes(task, f.var).is_some());
                if !overwritten {
                    eff.entry(f.var).or_default().insert(f.val);
                }
            }
        }
        let mut prod = BTreeSet::new();
        let mut del = BTreeSet::new();
        for (&v, vals) in &eff {
            if vals.len() == 1 {
                let f = Fact { var: v, val: *vals.iter().next().unwrap() };
                if !pre.contains(&f) {
                    prod.insert(f);
                }
            }
            let cons_vals: BTreeSet<usize> = pre.iter().filter(|f| f.var == v).map(|f| f.val).collect();
            for d in 0..task.domain_size(v) {
                if (cons_vals.is_empty() || cons_vals.contains(&d)) && vals.iter().any(|&e| e != d) {
                    del.insert(Fact { var: v, val: d });
                }
            }
        }
        Semantics { pre, eff, prod, del }
    }
}

/// Children of one block with their derived orderings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Level {
    pub(crate) children: Vec<Item>,
    pub(crate) index: BTreeMap<Item, usize>,
    pub(crate) edges: BTreeMap<(usize, usize), BTreeSet<OrderingReason>>,
    pub(crate) closure: BitMatrix,
}

impl Level {
    /// Children sorted by position in the reference execution.
    pub fn children(&self) -> &[Item] {
        &self.children
    }

    pub fn precedes(&self, x: Item, y: Item) -> bool {
        match (self.index.get(&x), self.index.get(&y)) {
            (Some(&i), Some(&j)) => self.closure.get(i, j),
            _ => false,
        }
    }

    pub fn has_edge(&self, x: Item, y: Item) -> bool {
        self.reasons(x, y).is_some()
    }

    pub fn reasons(&self, x: Item, y: Item) -> Option<&BTreeSet<OrderingReason>> {
        self.edges.get(&(*self.index.get(&x)?, *self.index.get(&y)?))
    }

    /// Transitive reduction of the level ordering.
    pub fn basic(&self) -> Vec<(Item, Item)> {
        let k = self.children.len();
        let mut out = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if self.closure.get(i, j) && !(0..k).any(|z| self.closure.get(i, z) && self.closure.get(z, j)) {
                    out.push((self.children[i], self.children[j]));
                }
            }
        }
        out
    }

    /// Nearest predecessors and successors of a set of children once the set
    /// is contracted to one item.
    pub fn set_neighbours(&self, set: &BTreeSet<Item>) -> (Vec<Item>, Vec<Item>) {
        let outside = || self.children.iter().copied().filter(|z| !set.contains(z));
        let before = |z: Item| set.iter().any(|&x| self.precedes(z, x));
        let after = |z: Item| set.iter().any(|&x| self.precedes(x, z));
        let preds = outside()
            .filter(|&z| before(z) && !outside().any(|w| w != z && self.precedes(z, w) && before(w)))
            .collect();
        let succs = outside()
            .filter(|&z| after(z) && !outside().any(|w| w != z && self.precedes(w, z) && after(w)))
            .collect();
        (preds, succs)
    }

    /// Direct predecessors and successors of `x` in the reduction.
    pub fn neighbours(&self, x: Item) -> (Vec<Item>, Vec<Item>) {
        let basic = self.basic();
        let preds = basic.iter().filter(|e| e.1 == x).map(|e| e.0).collect();
        let succs = basic.iter().filter(|e| e.0 == x).map(|e| e.1).collect();
        (preds, succs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub(crate) levels: BTreeMap<BlockId, Level>,
    pub(crate) sem: BTreeMap<Item, Semantics>,
    pub(crate) first: BTreeMap<Item, usize>,
    pub(crate) members: BTreeMap<Item, Vec<NodeId>>,
    pub(crate) pos: Vec<usize>,
    /// Effective order over the node arena.
    pub(crate) order: BitMatrix,
}

impl Layout {
    pub fn level(&self, b: BlockId) -> Option<&Level> {
        self.levels.get(&b)
    }

    pub fn pos(&self, n: NodeId) -> usize {
        self.pos[n.0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("ordering cycle among children of block {}", .0 .0)]
    Cycle(BlockId),
    #[error("ordering {from:?} -> {to:?} runs against the reference execution")]
    Backward { level: BlockId, from: Item, to: Item },
    #[error("{deleter:?} can fall between the ends of {link:?}")]
    Threatened { link: CausalLink, deleter: Item },
    #[error("producer side of {0:?} does not end with the linked value")]
    ProducerNotFinal(CausalLink),
    #[error("threat of {deleter:?} on {link:?} cannot be ordered away")]
    Unresolvable { level: BlockId, link: CausalLink, producer: Item, consumer: Item, deleter: Item },
    #[error("precondition {fact:?} of {node:?} has no causal link")]
    Unsupported { node: NodeId, fact: Fact },
    #[error("malformed causal link {0:?}")]
    BadLink(CausalLink),
    #[error("items do not share a parent block")]
    NotSiblings,
    #[error("grouping would order operators that were unordered")]
    NotConvex,
}

/// How threats between siblings get ordered.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Policy<'a> {
    /// Follow the stored execution; reject edges that contradict it.
    Reference,
    /// Keep `seeds`, then demote or promote each open threat.
    Repair { seeds: &'a [(Item, Item, OrderingReason)] },
}

struct Builder {
    children: Vec<Item>,
    index: BTreeMap<Item, usize>,
    edges: BTreeMap<(usize, usize), BTreeSet<OrderingReason>>,
}

impl Builder {
    fn add(&mut self, x: Item, y: Item, r: Option<OrderingReason>) {
        let (i, j) = (self.index[&x], self.index[&y]);
        if i == j {
            return;
        }
        let e = self.edges.entry((i, j)).or_default();
        if let Some(r) = r {
            e.insert(r);
        }
    }
}

pub(crate) fn derive(plan: &BdpoPlan, task: &FdrTask, policy: Policy) -> Result<Layout, Violation> {
    let n = plan.nodes.len();
    let mut pos = vec![usize::MAX; n];
    for (i, &m) in plan.reference.iter().enumerate() {
        pos[m.0] = i;
    }
    let post = plan.post_order();
    let mut first: BTreeMap<Item, usize> = BTreeMap::new();
    let mut members: BTreeMap<Item, Vec<NodeId>> = BTreeMap::new();
    let mut sem: BTreeMap<Item, Semantics> = BTreeMap::new();
    for &m in &plan.reference {
        first.insert(Item::Node(m), pos[m.0]);
        members.insert(Item::Node(m), vec![m]);
        sem.insert(Item::Node(m), Semantics::primitive(task, plan.nodes[m.0]));
    }
    for &b in &post {
        let mut ms = Vec::new();
        for c in &plan.blocks[b.0].children {
            ms.extend(members.get(c).cloned().unwrap_or_default());
        }
        ms.sort_by_key(|m| pos[m.0]);
        first.insert(Item::Block(b), ms.first().map_or(usize::MAX, |m| pos[m.0]));
        members.insert(Item::Block(b), ms);
    }

    // lift every link to the level where its ends part ways
    let mut lifted: BTreeMap<BlockId, Vec<(CausalLink, Item, Item)>> = BTreeMap::new();
    let mut entering: BTreeMap<BlockId, Vec<(CausalLink, Item)>> = BTreeMap::new();
    let mut leaving: BTreeMap<BlockId, Vec<(CausalLink, Item)>> = BTreeMap::new();
    for l in &plan.links {
        let (lv, cp, cc) = plan.lca(Item::Node(l.producer), Item::Node(l.consumer));
        lifted.entry(lv).or_default().push((*l, cp, cc));
        for (end, map) in [(l.consumer, &mut entering), (l.producer, &mut leaving)] {
            let path = plan.path(Item::Node(end));
            for i in 1..path.len() {
                if path[i] == Item::Block(lv) {
                    break;
                }
                let Item::Block(b) = path[i] else { unreachable!() };
                map.entry(b).or_default().push((*l, path[i - 1]));
            }
        }
    }
    let mut extra: BTreeMap<BlockId, Vec<(Item, Item, Option<OrderingReason>)>> = BTreeMap::new();
    for &(a, b) in &plan.pinned {
        if plan.is_alive(a) && plan.is_alive(b) {
            let (lv, x, y) = plan.lca(a, b);
            extra.entry(lv).or_default().push((x, y, None));
        }
    }
    if let Policy::Repair { seeds } = policy {
        for &(a, b, r) in seeds {
            if plan.is_alive(a) && plan.is_alive(b) {
                let (lv, x, y) = plan.lca(a, b);
                extra.entry(lv).or_default().push((x, y, Some(r)));
            }
        }
    }
    let reference = matches!(policy, Policy::Reference);

    let mut order = BitMatrix::new(n);
    let mut levels = BTreeMap::new();
    for &b in &post {
        let mut children = plan.blocks[b.0].children.clone();
        children.sort_by_key(|c| first[c]);
        let index: BTreeMap<Item, usize> = children.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut bl = Builder { children, index, edges: BTreeMap::new() };
        let mut forced: Vec<(Item, Item, Option<OrderingReason>)> = Vec::new();
        if b == ROOT {
            let (init, goal) = (Item::Node(plan.init()), Item::Node(plan.goal));
            for &c in &bl.children {
                if c != init {
                    forced.push((init, c, None));
                }
                if c != goal {
                    forced.push((c, goal, None));
                }
            }
        }
        let empty = Vec::new();
        let here = lifted.get(&b).unwrap_or(&empty);
        for &(l, cp, cc) in here {
            if sem[&cp].final_value(l.fact.var) != Some(l.fact.val) {
                return Err(Violation::ProducerNotFinal(l));
            }
            forced.push((cp, cc, Some(OrderingReason::pc(l.fact))));
        }
        forced.extend(extra.get(&b).into_iter().flatten().copied());
        // a link entering the block: inner deleters go after the consumer side
        for &(l, x) in entering.get(&b).into_iter().flatten() {
            for &d in &bl.children {
                if d != x && sem[&d].deletes(l.fact) {
                    forced.push((x, d, Some(OrderingReason::cd(l.fact))));
                }
            }
        }
        // a link leaving the block: inner deleters go before the producer side
        for &(l, y) in leaving.get(&b).into_iter().flatten() {
            for &d in &bl.children {
                if d != y && sem[&d].deletes(l.fact) {
                    forced.push((d, y, Some(OrderingReason::dp(l.fact))));
                }
            }
        }
        for &(x, y, r) in &forced {
            if reference && first[&x] > first[&y] {
                return Err(Violation::Backward { level: b, from: x, to: y });
            }
            bl.add(x, y, r);
        }

        let mut threats = Vec::new();
        for &(l, cp, cc) in here {
            for &d in &bl.children {
                if d != cp && d != cc && sem[&d].deletes(l.fact) && !(b == ROOT && d == Item::Node(plan.init())) {
                    threats.push((l, cp, cc, d));
                }
            }
        }
        let k = bl.children.len();
        let mut closure = BitMatrix::new(k);
        for &(i, j) in bl.edges.keys() {
            closure.set(i, j);
        }
        closure.close();
        if closure.has_cycle() {
            return Err(Violation::Cycle(b));
        }
        for (l, cp, cc, d) in threats {
            let (ip, ic, id) = (bl.index[&cp], bl.index[&cc], bl.index[&d]);
            if reference {
                if first[&d] < first[&cp] {
                    bl.add(d, cp, Some(OrderingReason::dp(l.fact)));
                } else if first[&d] > first[&cc] {
                    bl.add(cc, d, Some(OrderingReason::cd(l.fact)));
                } else {
                    return Err(Violation::Threatened { link: l, deleter: d });
                }
                continue;
            }
            if closure.get(id, ip) {
                bl.add(d, cp, Some(OrderingReason::dp(l.fact)));
            } else if closure.get(ic, id) {
                bl.add(cc, d, Some(OrderingReason::cd(l.fact)));
            } else if !closure.get(id, ic) {
                bl.add(cc, d, Some(OrderingReason::cd(l.fact)));
                closure.add_closed(ic, id);
            } else if !closure.get(ip, id) {
                bl.add(d, cp, Some(OrderingReason::dp(l.fact)));
                closure.add_closed(id, ip);
            } else {
                return Err(Violation::Unresolvable { level: b, link: l, producer: cp, consumer: cc, deleter: d });
            }
        }
        if reference {
            for &(i, j) in bl.edges.keys() {
                closure.set(i, j);
            }
            closure.close();
        }

        for i in 0..k {
            for j in closure.row(i) {
                for &m in &members[&bl.children[i]] {
                    for &m2 in &members[&bl.children[j]] {
                        order.set(m.0, m2.0);
                    }
                }
            }
        }
        if b != ROOT {
            let s = Semantics::block(task, plan, &members[&Item::Block(b)], &order);
            sem.insert(Item::Block(b), s);
        }
        levels.insert(b, Level { children: bl.children, index: bl.index, edges: bl.edges, closure });
    }
    Ok(Layout { levels, sem, first, members, pos, order })
}
