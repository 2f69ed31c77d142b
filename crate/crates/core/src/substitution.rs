//! Replacing blocks of a plan with alternative subplans.

use crate::block::{BdpoPlan, BlockId, BlockNode, Item, Policy, Violation};
use crate::concurrency::{op_conflict_vars, PbdPlan};
use crate::dtg::{extend, predecessor_state};
use crate::fdr::{Fact, FdrTask, OpId, PartialState, SequentialPlan, VarId};
use crate::metrics::PairRatio;
use crate::pop::{eog, CausalLink, NodeId, OrderingReason, PartialOrderPlan, PlanNode};
use crate::subplanner::{SubplanRequest, Subplanner};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Nested internal substitutions allowed while settling one replacement.
const MAX_INTERNAL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    LinkAdded { producer: NodeId, consumer: NodeId, fact: Fact },
    LinkResourced { from: NodeId, to: NodeId, consumer: NodeId, fact: Fact },
    OrderingAdded { from: Item, to: Item, reasons: BTreeSet<OrderingReason> },
    InternalSubstitution { replaced: Item, by: Item },
    Rejected { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubstitutionOutcome {
    /// The input plan, untouched, unless `success`.
    pub plan: PbdPlan,
    pub success: bool,
    pub trace: Vec<TraceEvent>,
    /// The item now standing where the replaced items were.
    pub new_item: Option<Item>,
}

impl SubstitutionOutcome {
    fn rejected(pbd: &PbdPlan, mut trace: Vec<TraceEvent>, reason: String) -> Self {
        trace.push(TraceEvent::Rejected { reason });
        SubstitutionOutcome { plan: pbd.clone(), success: false, trace, new_item: None }
    }
}

/// Replaces sibling `target` items with `replacement`, linked into the plan
/// from the state their predecessors leave behind.
pub fn substitute(task: &FdrTask, pbd: &PbdPlan, target: &[Item], replacement: &SequentialPlan) -> SubstitutionOutcome {
    run(task, pbd, target, replacement, false)
}

fn run(task: &FdrTask, pbd: &PbdPlan, target: &[Item], replacement: &SequentialPlan, inherit: bool) -> SubstitutionOutcome {
    let mut trace = Vec::new();
    match (Substitution { task, old: &pbd.plan, trace: &mut trace }).apply(target, replacement, inherit) {
        Ok((plan, new_item)) => {
            SubstitutionOutcome { plan: PbdPlan::new(plan, task), success: true, trace, new_item }
        }
        Err(reason) => SubstitutionOutcome::rejected(pbd, trace, reason),
    }
}

struct Substitution<'a> {
    task: &'a FdrTask,
    old: &'a BdpoPlan,
    trace: &'a mut Vec<TraceEvent>,
}

/// Last writer of each variable inside the replacement and the value it leaves.
type FinalWriters = BTreeMap<VarId, Option<(NodeId, usize)>>;

impl<'a> Substitution<'a> {
    fn apply(self, target: &[Item], replacement: &SequentialPlan, inherit: bool) -> Result<(BdpoPlan, Option<Item>), String> {
        let (task, old) = (self.task, self.old);
        let level = sibling_level(old, target)?;
        let targets: BTreeSet<Item> = target.iter().copied().collect();
        let s0 = predecessor_state(old, task, target).map_err(|e| e.to_string())?;
        let mut sub = task.clone();
        sub.init = s0;
        // supplied facts the replacement rewrites; their last writers get ordered
        let inside: BTreeSet<NodeId> = target.iter().flat_map(|&t| old.members(t)).collect();
        let written: BTreeSet<VarId> = replacement.ops().flat_map(|o| task.op(o).eff.vars().collect::<Vec<_>>()).collect();
        sub.goal = PartialState::from_facts(
            old.links()
                .iter()
                .filter(|l| inside.contains(&l.producer) && !inside.contains(&l.consumer) && written.contains(&l.fact.var))
                .map(|l| l.fact),
        );
        let sub_pop = eog(replacement, &sub)
            .map_err(|_| "replacement does not run from the predecessor state or misses a supplied fact".to_string())?;
        let (preds, succs) = old.layout().level(level).unwrap().set_neighbours(&targets);

        let mut next = old.clone();
        let dead_from = first_dead_index(old, &targets);
        let leaving = remove_items(&mut next, level, &targets);

        // new nodes, in the replacement's own order
        let sub_order = sub_pop.topological_nodes().map_err(|e| e.to_string())?;
        let mut fresh = old
            .nodes
            .iter()
            .filter_map(|n| match n {
                PlanNode::Op { instance, .. } => Some(*instance + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut new_nodes = Vec::new();
        for &s in &sub_order {
            if let PlanNode::Op { op, .. } = sub_pop.node(s) {
                let id = NodeId(next.nodes.len());
                next.nodes.push(PlanNode::Op { op, instance: fresh });
                next.alive.push(true);
                next.parent.push(level);
                fresh += 1;
                map.insert(s, id);
                new_nodes.push(id);
            }
        }
        let new_item = match new_nodes.len() {
            0 => None,
            1 => {
                next.blocks[level.0].children.push(Item::Node(new_nodes[0]));
                Some(Item::Node(new_nodes[0]))
            }
            _ => {
                let id = BlockId(next.blocks.len());
                for &n in &new_nodes {
                    next.parent[n.0] = id;
                }
                next.blocks.push(BlockNode {
                    parent: Some(level),
                    children: new_nodes.iter().map(|&n| Item::Node(n)).collect(),
                    alive: true,
                });
                next.blocks[level.0].children.push(Item::Block(id));
                Some(Item::Block(id))
            }
        };
        let writers = final_writers(task, &sub_pop, &map);

        // links inside the replacement, then its open preconditions
        for l in sub_pop.links() {
            if let (Some(&p), Some(&c)) = (map.get(&l.producer), map.get(&l.consumer)) {
                next.links.push(CausalLink { producer: p, consumer: c, fact: l.fact });
            }
        }
        for l in sub_pop.links() {
            if l.producer != sub_pop.init() || !map.contains_key(&l.consumer) {
                continue;
            }
            let producer = earliest_producer(task, old, level, &targets, l.fact)
                .ok_or_else(|| format!("no candidate producer for {}", task.fact_name(l.fact)))?;
            let link = CausalLink { producer, consumer: map[&l.consumer], fact: l.fact };
            next.links.push(link);
            self.trace.push(TraceEvent::LinkAdded { producer, consumer: link.consumer, fact: l.fact });
        }
        let pass = |f: Fact| earliest_producer(task, old, level, &targets, f);
        resource(task, &mut next, &leaving, &writers, Some(&pass), self.trace)?;

        let mut reference: Vec<NodeId> = old.reference.iter().copied().filter(|&n| next.alive[n.0]).collect();
        let at = old.reference[..dead_from].iter().filter(|&&n| next.alive[n.0]).count();
        reference.splice(at..at, new_nodes.iter().copied());
        next.reference = reference;

        let mut seeds: Vec<(Item, Item, OrderingReason)> = Vec::new();
        for lv in old.layout.levels.values() {
            for (&(i, j), rs) in &lv.edges {
                for &r in rs {
                    seeds.push((lv.children[i], lv.children[j], r));
                }
            }
        }
        for (&(a, b), rs) in sub_pop.edges() {
            if let (Some(&x), Some(&y)) = (map.get(&a), map.get(&b)) {
                for &r in rs {
                    seeds.push((Item::Node(x), Item::Node(y), r));
                }
            }
        }
        if let (true, Some(item)) = (inherit, new_item) {
            let fixed = [Item::Node(old.init()), Item::Node(old.goal())];
            next.pinned.extend(preds.iter().filter(|p| !fixed.contains(p)).map(|&p| (p, item)));
            next.pinned.extend(succs.iter().filter(|s| !fixed.contains(s)).map(|&s| (item, s)));
        }

        let mut depth = 0;
        let layout = loop {
            match next.derive(task, Policy::Repair { seeds: &seeds }) {
                Ok(l) => break l,
                Err(Violation::Unresolvable { level: lv, consumer, deleter, .. }) if depth < MAX_INTERNAL => {
                    let Some(item) = new_item else { return Err("unresolvable threat".into()) };
                    let victim = if deleter == item {
                        consumer
                    } else if consumer == item {
                        deleter
                    } else {
                        return Err("threat not involving the replacement cannot be ordered".into());
                    };
                    if victim == Item::Node(old.init()) || victim == Item::Node(old.goal()) {
                        return Err("threat against the initial or goal node".into());
                    }
                    depth += 1;
                    let leaving = remove_items(&mut next, lv, &BTreeSet::from([victim]));
                    resource(task, &mut next, &leaving, &writers, None, self.trace)?;
                    self.trace.push(TraceEvent::InternalSubstitution { replaced: victim, by: item });
                }
                Err(e) => return Err(e.to_string()),
            }
        };

        let pos = layout.pos.clone();
        next.layout = layout;
        let reference = {
            let order = &next.layout.order;
            next.legal_reference(&|a, c| order.get(a.0, c.0), &|n| pos[n.0])
        }
        .ok_or("orderings are cyclic")?;
        next.reference = reference;
        next.refresh(task).map_err(|e| e.to_string())?;
        if let Some(item) = new_item {
            for (x, y, reasons) in next.basic_orderings(level) {
                if (x == item || y == item) && !reasons.is_empty() {
                    self.trace.push(TraceEvent::OrderingAdded { from: x, to: y, reasons });
                }
            }
        }
        Ok((next, new_item))
    }
}

fn sibling_level(plan: &BdpoPlan, target: &[Item]) -> Result<BlockId, String> {
    let fixed = [Item::Node(plan.init()), Item::Node(plan.goal())];
    if target.is_empty() || target.iter().any(|t| !plan.is_alive(*t) || fixed.contains(t)) {
        return Err("target must be alive operator items or blocks".into());
    }
    let parents: BTreeSet<Option<BlockId>> = target.iter().map(|&t| plan.parent_of(t)).collect();
    match (parents.len(), parents.into_iter().next()) {
        (1, Some(Some(l))) => Ok(l),
        _ => Err("target items are not siblings".into()),
    }
}

/// Index in the old reference of the first node being replaced.
fn first_dead_index(plan: &BdpoPlan, items: &BTreeSet<Item>) -> usize {
    let dead: BTreeSet<NodeId> = items.iter().flat_map(|&i| plan.members(i)).collect();
    plan.reference.iter().position(|n| dead.contains(n)).unwrap_or(plan.reference.len())
}

/// Deletes sibling items of `level`; returns the links they supplied to the rest.
fn remove_items(plan: &mut BdpoPlan, level: BlockId, items: &BTreeSet<Item>) -> Vec<CausalLink> {
    let mut stack: Vec<Item> = items.iter().copied().collect();
    while let Some(i) = stack.pop() {
        match i {
            Item::Node(n) => plan.alive[n.0] = false,
            Item::Block(b) => {
                stack.append(&mut plan.blocks[b.0].children);
                plan.blocks[b.0].alive = false;
            }
        }
    }
    plan.blocks[level.0].children.retain(|c| !items.contains(c));
    let alive = plan.alive.clone();
    let leaving = plan.links.iter().copied().filter(|l| !alive[l.producer.0] && alive[l.consumer.0]).collect();
    plan.links.retain(|l| alive[l.producer.0] && alive[l.consumer.0]);
    let keep: Vec<(Item, Item)> = plan.pinned.iter().copied().filter(|&(a, b)| plan.is_alive(a) && plan.is_alive(b)).collect();
    plan.pinned = keep;
    plan.reference.retain(|n| alive[n.0]);
    leaving
}

/// For each variable the replacement writes: its last writer, when all last
/// writers agree on the value.
fn final_writers(task: &FdrTask, sub: &PartialOrderPlan, map: &BTreeMap<NodeId, NodeId>) -> FinalWriters {
    let mut out = FinalWriters::new();
    let writes = |s: NodeId, v: VarId| sub.node(s).writes(task, v);
    let vars: BTreeSet<VarId> = map.keys().flat_map(|&s| sub.node(s).eff(task).vars().collect::<Vec<_>>()).collect();
    for v in vars {
        let ws: Vec<NodeId> = map.keys().copied().filter(|&s| writes(s, v).is_some()).collect();
        let last: Vec<NodeId> = ws.iter().copied().filter(|&w| !ws.iter().any(|&x| sub.precedes(w, x))).collect();
        let vals: BTreeSet<usize> = last.iter().filter_map(|&w| writes(w, v)).collect();
        let entry = (vals.len() == 1).then(|| {
            let w = *last.iter().max_by_key(|w| map[w]).unwrap();
            (map[&w], writes(w, v).unwrap())
        });
        out.insert(v, entry);
    }
    out
}

/// Moves links that used to start at removed nodes onto the replacement.
/// A fact the replacement leaves untouched may instead come from `pass`,
/// which finds a producer ahead of the replaced items.
fn resource(
    task: &FdrTask,
    plan: &mut BdpoPlan,
    leaving: &[CausalLink],
    writers: &FinalWriters,
    pass: Option<&dyn Fn(Fact) -> Option<NodeId>>,
    trace: &mut Vec<TraceEvent>,
) -> Result<(), String> {
    for l in leaving {
        let to = match (writers.get(&l.fact.var), pass) {
            (Some(Some((w, val))), _) if *val == l.fact.val => Some(*w),
            (None, Some(pass)) => pass(l.fact),
            _ => None,
        };
        let Some(to) = to else {
            return Err(format!("replacement does not produce {}", task.fact_name(l.fact)));
        };
        plan.links.push(CausalLink { producer: to, consumer: l.consumer, fact: l.fact });
        trace.push(TraceEvent::LinkResourced { from: l.producer, to, consumer: l.consumer, fact: l.fact });
    }
    Ok(())
}

/// Earliest item outside the target that produces `f`, is not ordered after
/// the target, and has no deleter of `f` necessarily between it and the target.
/// Returns the member node that writes the value last.
fn earliest_producer(task: &FdrTask, plan: &BdpoPlan, level: BlockId, targets: &BTreeSet<Item>, f: Fact) -> Option<NodeId> {
    let path = plan.path(Item::Block(level));
    let mut pool = Vec::new();
    for (i, &b) in path.iter().enumerate() {
        let Item::Block(b) = b else { continue };
        for &c in plan.children(b) {
            if !targets.contains(&c) && (i == 0 || c != path[i - 1]) {
                pool.push(c);
            }
        }
    }
    let candidates: Vec<Item> = pool
        .iter()
        .copied()
        .filter(|&c| plan.semantics(c).produces(f))
        .filter(|&c| !targets.iter().any(|&t| plan.item_precedes(t, c)))
        .filter(|&c| {
            !pool.iter().any(|&d| {
                d != c
                    && plan.semantics(d).deletes(f)
                    && plan.item_precedes(c, d)
                    && targets.iter().any(|&t| plan.item_precedes(d, t))
            })
        })
        .collect();
    let best = candidates
        .iter()
        .copied()
        .filter(|&c| !candidates.iter().any(|&o| o != c && plan.item_precedes(o, c)))
        .min_by_key(|&c| plan.first_pos(c))?;
    plan.members(best)
        .into_iter()
        .filter(|&n| plan.node(n).writes(task, f.var) == Some(f.val))
        .max_by_key(|&n| plan.layout().pos(n))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubtaskError {
    #[error(transparent)]
    Extend(#[from] crate::dtg::ExtendError),
    #[error("items leave conflicting values for {0:?}")]
    ConflictingGoal(VarId),
}

/// Subtask whose solutions can stand in for `items`: start where their
/// predecessors leave off, supply what they hand on, and keep facts that
/// pass over them.
pub fn build_subtask(task: &FdrTask, pbd: &PbdPlan, items: &[Item], limits: &dyn Subplanner) -> Result<SubplanRequest, SubtaskError> {
    let plan = &pbd.plan;
    let inside: BTreeSet<NodeId> = items.iter().flat_map(|&i| plan.members(i)).collect();
    let init = predecessor_state(plan, task, items)?;
    let mut goal: BTreeMap<VarId, usize> = BTreeMap::new();
    let mut add = |f: Fact| match goal.insert(f.var, f.val) {
        Some(d) if d != f.val => Err(SubtaskError::ConflictingGoal(f.var)),
        _ => Ok(()),
    };
    for l in plan.links() {
        let p_in = inside.contains(&l.producer);
        let c_in = inside.contains(&l.consumer);
        let crossing = !p_in
            && !c_in
            && inside.iter().any(|&m| plan.precedes(l.producer, m))
            && inside.iter().any(|&m| plan.precedes(m, l.consumer));
        if (p_in && !c_in) || crossing {
            add(l.fact)?;
        }
    }
    let cost_bound = inside.iter().filter_map(|&n| plan.op_of(n)).map(|o| task.cost(o)).sum();
    let mut subtask = task.clone();
    subtask.init = init;
    subtask.goal = PartialState::from_facts(goal.into_iter().map(|(v, d)| Fact { var: v, val: d }));
    Ok(SubplanRequest { subtask, cost_bound, time_bound: limits.time_bound(), max_solutions: limits.max_solutions() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CandidateVerdict {
    Conflicting { vars: BTreeSet<VarId> },
    SubstitutionFailed { reason: String },
    NoGain { cflex_before: Option<PairRatio>, cflex_after: Option<PairRatio> },
    CostIncrease { before: u64, after: u64 },
    Accepted { cflex_before: Option<PairRatio>, cflex_after: PairRatio },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CandidateRecord {
    pub ops: Vec<String>,
    pub cost: u64,
    #[serde(flatten)]
    pub verdict: CandidateVerdict,
}

/// What one attempt to separate a conflicting pair did.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResolveRecord {
    pub replaced: Item,
    pub partner: Item,
    pub extended: Vec<Item>,
    pub error: Option<String>,
    pub candidates: Vec<CandidateRecord>,
    pub success: bool,
    pub trace: Vec<TraceEvent>,
}

/// Replaces `b_i` (grown as needed) by a subplan that conflicts with nothing
/// in `b_j`, keeping it only if concurrency rises and cost does not.
pub fn resolve_nonconcurrency(
    task: &FdrTask,
    pbd: &PbdPlan,
    b_i: Item,
    b_j: Item,
    planner: &dyn Subplanner,
) -> (SubstitutionOutcome, ResolveRecord) {
    let mut record = ResolveRecord {
        replaced: b_i,
        partner: b_j,
        extended: Vec::new(),
        error: None,
        candidates: Vec::new(),
        success: false,
        trace: Vec::new(),
    };
    let fail = |mut record: ResolveRecord, reason: String| {
        record.error = Some(reason.clone());
        let out = SubstitutionOutcome::rejected(pbd, Vec::new(), reason);
        record.trace = out.trace.clone();
        (out, record)
    };
    let ext = match extend(task, pbd, b_i, b_j) {
        Ok(e) => e,
        Err(e) => return fail(record, e.to_string()),
    };
    record.extended = ext.items.clone();
    let req = match build_subtask(task, pbd, &ext.items, planner) {
        Ok(r) => r,
        Err(e) => return fail(record, e.to_string()),
    };
    let candidates = match planner.solve(&req) {
        Ok(c) => c,
        Err(e) => return fail(record, format!("planner: {e}")),
    };
    let j_ops: Vec<OpId> = pbd.plan.members(b_j).iter().filter_map(|&n| pbd.plan.op_of(n)).collect();
    let before = pbd.cflex().ok();
    let cost = pbd.plan.cost(task);
    for cand in &candidates {
        let ops = cand.ops().map(|o| task.op(o).name.clone()).collect();
        let mut vars = BTreeSet::new();
        for o in cand.ops() {
            for &p in &j_ops {
                vars.extend(op_conflict_vars(task.op(o), task.op(p)));
            }
        }
        let verdict = if !vars.is_empty() {
            CandidateVerdict::Conflicting { vars }
        } else {
            let out = run(task, pbd, &ext.items, cand, true);
            let after = out.plan.cflex().ok();
            let new_cost = out.plan.plan.cost(task);
            if !out.success {
                let reason = match out.trace.last() {
                    Some(TraceEvent::Rejected { reason }) => reason.clone(),
                    _ => String::new(),
                };
                CandidateVerdict::SubstitutionFailed { reason }
            } else if new_cost > cost {
                CandidateVerdict::CostIncrease { before: cost, after: new_cost }
            } else if let Some(gain) = after.filter(|a| before.map_or(true, |b| *a > b)) {
                record.candidates.push(CandidateRecord {
                    ops,
                    cost: task.plan_cost(cand),
                    verdict: CandidateVerdict::Accepted { cflex_before: before, cflex_after: gain },
                });
                record.success = true;
                record.trace = out.trace.clone();
                return (out, record);
            } else {
                CandidateVerdict::NoGain { cflex_before: before, cflex_after: after }
            }
        };
        record.candidates.push(CandidateRecord { ops, cost: task.plan_cost(cand), verdict });
    }
    let out = SubstitutionOutcome::rejected(pbd, Vec::new(), "no acceptable candidate".into());
    record.trace = out.trace.clone();
    (out, record)
}

#[cfg(test)]
mod tests;
