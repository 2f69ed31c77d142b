//! Removing basic orderings by wrapping items into blocks.

use super::{BdpoPlan, BlockId, Item, ROOT};
use crate::fdr::FdrTask;
use crate::pop::{NodeId, OrderingReason, ReasonKind};
use serde::Serialize;
use std::collections::BTreeSet;

/// Combinations of per-reason candidates tried for one ordering.
const MAX_COMBINATIONS: usize = 32;
/// Follow-up attempts when grouping leaves a direct edge between the groups.
const MAX_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DeorderStats {
    pub attempted: usize,
    pub deordered: usize,
}

/// One candidate fix for a single ordering reason.
#[derive(Clone, Debug, Default)]
struct Candidate {
    hull: Vec<Item>,
    /// (link index, new producer)
    resource: Vec<(usize, NodeId)>,
}

/// Repeatedly removes the earliest removable basic ordering.
/// Every accepted step strictly shrinks the effective order.
pub fn block_deorder(plan: &BdpoPlan, task: &FdrTask) -> (BdpoPlan, DeorderStats) {
    let mut cur = plan.clone();
    let mut stats = DeorderStats::default();
    'outer: loop {
        for (lv, x, y) in candidates(&cur) {
            stats.attempted += 1;
            if let Some(next) = attempt(&cur, &cur, task, lv, x, y, (x, y), 0) {
                cur = next;
                stats.deordered += 1;
                continue 'outer;
            }
        }
        break;
    }
    (cur, stats)
}

fn candidates(plan: &BdpoPlan) -> Vec<(BlockId, Item, Item)> {
    let skip = [Item::Node(plan.init()), Item::Node(plan.goal())];
    let mut out = Vec::new();
    for (&b, level) in &plan.layout.levels {
        for (x, y) in level.basic() {
            if !skip.contains(&x) && !skip.contains(&y) {
                out.push((plan.first_pos(x), plan.first_pos(y), b, x, y));
            }
        }
    }
    out.sort();
    out.into_iter().map(|(_, _, b, x, y)| (b, x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn attempt(
    orig: &BdpoPlan,
    cur: &BdpoPlan,
    task: &FdrTask,
    lv: BlockId,
    x: Item,
    y: Item,
    target: (Item, Item),
    depth: usize,
) -> Option<BdpoPlan> {
    let reasons = cur.layout.level(lv)?.reasons(x, y)?.clone();
    if reasons.is_empty() {
        return None;
    }
    let mut per_reason = Vec::new();
    for r in &reasons {
        let opts = options(cur, lv, x, y, *r);
        if opts.is_empty() {
            return None;
        }
        per_reason.push(opts);
    }
    for combo in product(&per_reason).into_iter().take(MAX_COMBINATIONS) {
        let Some(next) = apply(cur, task, lv, &combo) else { continue };
        if !shrinks(orig, &next) {
            continue;
        }
        let (tx, ty) = target;
        if !next.item_precedes(tx, ty) && !next.item_precedes(ty, tx) {
            if next.ordered_op_pairs() < orig.ordered_op_pairs() {
                return Some(next);
            }
            continue;
        }
        if depth < MAX_DEPTH {
            let (l2, xs, ys) = next.lca(x, y);
            if next.layout.level(l2).is_some_and(|l| l.has_edge(xs, ys)) {
                if let Some(done) = attempt(orig, &next, task, l2, xs, ys, target, depth + 1) {
                    return Some(done);
                }
            }
        }
    }
    None
}

/// Child of `lv` that contains node `n`.
fn ancestor_at(plan: &BdpoPlan, lv: BlockId, n: NodeId) -> Option<Item> {
    let path = plan.path(Item::Node(n));
    let i = path.iter().position(|&p| p == Item::Block(lv))?;
    (i > 0).then(|| path[i - 1])
}

fn options(plan: &BdpoPlan, lv: BlockId, x: Item, y: Item, r: OrderingReason) -> Vec<Candidate> {
    let level = plan.layout.level(lv).unwrap();
    let f = r.fact;
    let mx: BTreeSet<NodeId> = plan.layout.members[&x].iter().copied().collect();
    let my: BTreeSet<NodeId> = plan.layout.members[&y].iter().copied().collect();
    let init = Item::Node(plan.init());
    let goal = Item::Node(plan.goal());
    let mut out = Vec::new();
    match r.kind {
        ReasonKind::PC => {
            // an earlier sibling already needs f: group it with x so x is transparent for f;
            // earliest such sibling first
            let mut bcs: Vec<Item> = level
                .children()
                .iter()
                .copied()
                .filter(|&z| level.precedes(z, x) && plan.semantics(z).consumes(f))
                .collect();
            bcs.sort_by_key(|&z| plan.first_pos(z));
            for bc in bcs {
                let mb: BTreeSet<NodeId> = plan.layout.members[&bc].iter().copied().collect();
                let outside = plan
                    .links
                    .iter()
                    .find(|l| l.fact == f && mb.contains(&l.consumer) && !mb.contains(&l.producer))
                    .map(|l| l.producer);
                if let Some(p) = outside {
                    let resource = plan
                        .links
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| l.fact == f && mx.contains(&l.producer) && my.contains(&l.consumer))
                        .map(|(i, _)| (i, p))
                        .collect();
                    out.push(Candidate { hull: vec![bc, x], resource });
                }
            }
        }
        ReasonKind::CD => {
            // group x with the supplier of f
            let mut hull = vec![x];
            let mut ok = false;
            for l in &plan.links {
                if l.fact == f && mx.contains(&l.consumer) && !mx.contains(&l.producer) {
                    match ancestor_at(plan, lv, l.producer) {
                        Some(w) if w != init => {
                            hull.push(w);
                            ok = true;
                        }
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
            }
            if ok {
                out.push(Candidate { hull, resource: vec![] });
            }
            // group y with the next sibling restoring f
            let z = level
                .children()
                .iter()
                .copied()
                .filter(|&z| level.precedes(y, z) && z != goal && plan.semantics(z).final_value(f.var) == Some(f.val))
                .min_by_key(|&z| plan.first_pos(z));
            if let Some(z) = z {
                out.push(Candidate { hull: vec![y, z], resource: vec![] });
            }
        }
        ReasonKind::DP => {
            // group y with every consumer it supplies with f
            let mut hull = vec![y];
            let mut ok = true;
            for l in &plan.links {
                if l.fact == f && my.contains(&l.producer) && !my.contains(&l.consumer) {
                    match ancestor_at(plan, lv, l.consumer) {
                        Some(c) if c != goal => hull.push(c),
                        _ => ok = false,
                    }
                }
            }
            if ok && hull.len() > 1 {
                out.push(Candidate { hull, resource: vec![] });
            }
        }
    }
    out
}

fn product(per_reason: &[Vec<Candidate>]) -> Vec<Vec<Candidate>> {
    let mut acc: Vec<Vec<Candidate>> = vec![vec![]];
    for opts in per_reason {
        let mut next = Vec::new();
        for prefix in &acc {
            for o in opts {
                if next.len() >= MAX_COMBINATIONS {
                    break;
                }
                let mut p = prefix.clone();
                p.push(o.clone());
                next.push(p);
            }
        }
        acc = next;
    }
    acc
}

/// Convex closure of `set` among the children of a level.
fn convex(plan: &BdpoPlan, lv: BlockId, set: &BTreeSet<Item>) -> BTreeSet<Item> {
    let level = plan.layout.level(lv).unwrap();
    let le = |a: Item, b: Item| a == b || level.precedes(a, b);
    level
        .children()
        .iter()
        .copied()
        .filter(|&z| set.iter().any(|&a| le(a, z)) && set.iter().any(|&b| le(z, b)))
        .collect()
}

/// Siblings that would gain a new ordering against a group are pulled into it.
const MAX_GROWTH: usize = 4;

fn merge_overlapping(cur: &BdpoPlan, lv: BlockId, sets: &mut Vec<BTreeSet<Item>>) {
    loop {
        let mut merged = false;
        'scan: for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if !sets[i].is_disjoint(&sets[j]) {
                    let u: BTreeSet<Item> = sets[i].union(&sets[j]).copied().collect();
                    sets[i] = convex(cur, lv, &u);
                    sets.remove(j);
                    merged = true;
                    break 'scan;
                }
            }
        }
        if !merged {
            break;
        }
    }
}

fn apply(cur: &BdpoPlan, task: &FdrTask, lv: BlockId, combo: &[Candidate]) -> Option<BdpoPlan> {
    let mut sets: Vec<BTreeSet<Item>> = combo
        .iter()
        .filter(|c| !c.hull.is_empty())
        .map(|c| convex(cur, lv, &c.hull.iter().copied().collect()))
        .collect();
    for _ in 0..=MAX_GROWTH {
        merge_overlapping(cur, lv, &mut sets);
        let next = build(cur, task, lv, &sets, combo)?;
        let mut grown = false;
        for a in next.op_nodes() {
            for b in next.op_nodes() {
                if !next.precedes(a, b) || cur.precedes(a, b) {
                    continue;
                }
                let (ia, ib) = (ancestor_at(cur, lv, a)?, ancestor_at(cur, lv, b)?);
                let (sa, sb) = (sets.iter().position(|s| s.contains(&ia)), sets.iter().position(|s| s.contains(&ib)));
                match (sa, sb) {
                    (Some(i), None) => grown |= sets[i].insert(ib),
                    (None, Some(j)) => grown |= sets[j].insert(ia),
                    _ => return None,
                }
            }
        }
        if !grown {
            return Some(next);
        }
        for s in sets.iter_mut() {
            *s = convex(cur, lv, s);
        }
    }
    None
}

fn build(cur: &BdpoPlan, task: &FdrTask, lv: BlockId, sets: &[BTreeSet<Item>], combo: &[Candidate]) -> Option<BdpoPlan> {
    let level = cur.layout.level(lv)?;
    let fixed = [Item::Node(cur.init()), Item::Node(cur.goal())];
    let mut next = cur.clone();
    for set in sets {
        if set.iter().any(|i| fixed.contains(i)) || (lv != ROOT && set.len() == level.children().len()) {
            return None;
        }
        if set.len() >= 2 {
            let items: Vec<Item> = set.iter().copied().collect();
            next.add_block(lv, &items);
        }
    }
    for c in combo {
        for &(i, p) in &c.resource {
            next.links[i].producer = p;
        }
    }
    next.links.sort();
    next.links.dedup();
    let r = next.legal_reference(&|a, b| cur.precedes(a, b), &|n| cur.layout.pos(n))?;
    next.reference = r;
    next.refresh(task).ok()?;
    Some(next)
}

/// New effective order is contained in the old one.
fn shrinks(orig: &BdpoPlan, next: &BdpoPlan) -> bool {
    let ops = orig.op_nodes();
    ops.iter().all(|&a| ops.iter().all(|&b| !next.precedes(a, b) || orig.precedes(a, b)))
}
