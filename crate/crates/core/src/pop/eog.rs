use super::{CausalLink, NodeId, OrderingReason, PartialOrderPlan, PlanNode, PopError, ReasonMap};
use crate::bits::BitMatrix;
use crate::fdr::{FdrTask, SequentialPlan};

/// Explanation-based order generalisation of a valid sequential plan.
///
/// Each precondition is linked to the earliest producer not followed by a
/// deleter before the consumer; threats are resolved in the original order.
pub fn eog(plan: &SequentialPlan, task: &FdrTask) -> Result<PartialOrderPlan, PopError> {
    let report = task.validate(plan);
    if !report.valid {
        return Err(PopError::InvalidPlan(report.to_string()));
    }
    let mut nodes = vec![PlanNode::Init];
    nodes.extend(plan.steps.iter().map(|s| PlanNode::Op { op: s.op, instance: s.instance }));
    nodes.push(PlanNode::Goal);
    let n = nodes.len();
    let goal = n - 1;

    let mut links = Vec::new();
    for i in 1..n {
        for f in nodes[i].pre(task).iter() {
            // the last write of another value bounds the search for a producer
            let floor = (1..i)
                .rev()
                .find(|&j| nodes[j].writes(task, f.var).is_some_and(|d| d != f.val))
                .unwrap_or(0);
            let k = (floor..i)
                .find(|&k| nodes[k].writes(task, f.var) == Some(f.val))
                .expect("valid plan supplies every precondition");
            links.push(CausalLink { producer: NodeId(k), consumer: NodeId(i), fact: f });
        }
    }

    let mut edges = ReasonMap::new();
    for i in 1..goal {
        edges.entry((NodeId(0), NodeId(i))).or_default();
        edges.entry((NodeId(i), NodeId(goal))).or_default();
    }
    edges.entry((NodeId(0), NodeId(goal))).or_default();
    for l in &links {
        edges.entry((l.producer, l.consumer)).or_default().insert(OrderingReason::pc(l.fact));
        for (j, node) in nodes.iter().enumerate().take(goal).skip(1) {
            if j == l.producer.0 || j == l.consumer.0 || !node.deletes(task, l.fact) {
                continue;
            }
            if j < l.producer.0 {
                edges.entry((NodeId(j), l.producer)).or_default().insert(OrderingReason::dp(l.fact));
            } else {
                debug_assert!(j > l.consumer.0);
                edges.entry((l.consumer, NodeId(j))).or_default().insert(OrderingReason::cd(l.fact));
            }
        }
    }

    let mut closure = BitMatrix::new(n);
    for &(a, b) in edges.keys() {
        closure.set(a.0, b.0);
    }
    closure.close();
    Ok(PartialOrderPlan { nodes, links, edges, closure })
}
