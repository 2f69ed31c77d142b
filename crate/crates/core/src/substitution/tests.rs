use super::*;
use crate::block::{block_deorder, ROOT};
use crate::pop::ReasonKind;
use crate::subplanner::{PlannerConfig, PlannerError};
use crate::test_support::*;
use std::time::Duration;

fn node(i: usize) -> Item {
    Item::Node(NodeId(i + 1))
}

fn flat(name: &str) -> (FdrTask, PbdPlan) {
    let (task, seq) = fixture(name);
    let pop = eog(&seq, &task).unwrap();
    let pbd = PbdPlan::new(BdpoPlan::from_pop(&pop, &task).unwrap(), &task);
    (task, pbd)
}

fn plan_of(task: &FdrTask, names: &[&str]) -> SequentialPlan {
    SequentialPlan::from_ops(names.iter().map(|n| op_named(task, n)))
}

fn elevator_bd(two_lifts: bool) -> (FdrTask, PbdPlan) {
    let (task, seq) = if two_lifts { elevator2() } else { elevator1() };
    let pop = eog(&seq, &task).unwrap();
    let (bd, _) = block_deorder(&BdpoPlan::from_pop(&pop, &task).unwrap(), &task);
    (task.clone(), PbdPlan::new(bd, &task))
}

fn every_execution_runs(task: &FdrTask, plan: &BdpoPlan) -> bool {
    plan.legal_executions(5000).unwrap().iter().all(|exec| {
        let ops: Vec<OpId> = exec.iter().filter_map(|&n| plan.op_of(n)).collect();
        runs_to_goal(task, &ops)
    })
}

fn labels(task: &FdrTask, plan: &BdpoPlan, items: &[Item]) -> Vec<String> {
    items.iter().map(|&i| plan.item_label(task, i)).collect()
}

#[test]
fn replacement_is_linked_in_and_ordered_before_the_deleter() {
    // br bi bx bt bs
    let (task, pbd) = flat("substitute_chain");
    let out = substitute(&task, &pbd, &[node(2)], &plan_of(&task, &["bx_alt"]));
    assert!(out.success, "{:?}", out.trace);
    let plan = &out.plan.plan;
    let Some(Item::Node(new)) = out.new_item else { panic!() };
    let d1 = fact_named(&task, "v1", "d1");
    let d3 = fact_named(&task, "v3", "d3");
    let (br, bi, bt, bs) = (NodeId(1), NodeId(2), NodeId(4), NodeId(5));
    assert!(plan.links().contains(&CausalLink { producer: br, consumer: new, fact: d1 }));
    assert!(plan.links().contains(&CausalLink { producer: new, consumer: bt, fact: d3 }));
    let added: Vec<_> = out.trace.iter().filter(|e| matches!(e, TraceEvent::LinkAdded { .. })).collect();
    let moved: Vec<_> = out.trace.iter().filter(|e| matches!(e, TraceEvent::LinkResourced { .. })).collect();
    assert_eq!((added.len(), moved.len()), (1, 1));
    let level = plan.layout().level(ROOT).unwrap();
    let rs = level.reasons(Item::Node(new), Item::Node(bs)).expect("new op ordered before bs");
    assert!(rs.contains(&OrderingReason { kind: ReasonKind::CD, fact: d1 }));
    assert!(plan.unordered(bi, new));
    assert!(!plan.is_alive(node(2)));
    assert!(every_execution_runs(&task, plan));
    assert_eq!(plan.num_ops(), 5);
}

#[test]
fn replacement_missing_a_supplied_fact_is_rejected_atomically() {
    let (task, pbd) = flat("substitute_chain");
    let before = pbd.clone();
    let out = substitute(&task, &pbd, &[node(2)], &plan_of(&task, &["bx_bad"]));
    assert!(!out.success);
    assert_eq!(out.plan, before);
    assert!(matches!(out.trace.last(), Some(TraceEvent::Rejected { .. })));
}

#[test]
fn replacement_that_cannot_run_is_rejected() {
    let (task, pbd) = flat("substitute_chain");
    // bx needs v2=d2, which only bi provides
    let out = substitute(&task, &pbd, &[node(1)], &plan_of(&task, &["bx"]));
    assert!(!out.success);
    assert_eq!(out.plan, pbd);
}

#[test]
fn bad_targets_are_rejected() {
    let (task, pbd) = flat("substitute_chain");
    let r = plan_of(&task, &["bx_alt"]);
    assert!(!substitute(&task, &pbd, &[], &r).success);
    assert!(!substitute(&task, &pbd, &[Item::Node(pbd.plan.init())], &r).success);
}

#[test]
fn identical_replacement_keeps_metrics() {
    let (task, pbd) = flat("substitute_chain");
    let out = substitute(&task, &pbd, &[node(2)], &plan_of(&task, &["bx"]));
    assert!(out.success, "{:?}", out.trace);
    assert_eq!(out.plan.flex().unwrap(), pbd.flex().unwrap());
    assert_eq!(out.plan.plan.cost(&task), pbd.plan.cost(&task));
}

#[test]
fn subtask_for_the_third_passenger() {
    let (task, pbd) = elevator_bd(true);
    let plan = &pbd.plan;
    // the ops that carry p3: move_down e1 n2 n1, board p3, move_up e1 n1 n2
    let items: Vec<Item> = plan.children(ROOT).iter().copied().filter(|&c| plan.members(c).len() == 3).collect();
    assert_eq!(items.len(), 1);
    let req = build_subtask(&task, &pbd, &items, &PlannerConfig::default()).unwrap();
    let s0 = &req.subtask.init;
    assert!(s0.contains(fact_named(&task, "v_e2", "e2, n1")));
    assert!(s0.contains(fact_named(&task, "v_p3", "at(p3, n1)")));
    assert!(req.subtask.goal.contains(fact_named(&task, "v_p3", "in(p3, e1)")));
    assert_eq!(req.cost_bound, 3);
    assert_eq!(req.subtask.operators, task.operators);
}

#[test]
fn subtask_goal_covers_goal_links_and_crossing_facts() {
    let (task, pbd) = flat("substitute_chain");
    let cfg = PlannerConfig::default();
    // bt only feeds the goal
    let req = build_subtask(&task, &pbd, &[node(3)], &cfg).unwrap();
    assert_eq!(req.subtask.goal.facts(), &[fact_named(&task, "g1", "y")]);
    // br only hands v1=d1 on
    let req = build_subtask(&task, &pbd, &[node(0)], &cfg).unwrap();
    assert_eq!(req.subtask.goal.facts(), &[fact_named(&task, "v1", "d1")]);
    // bi feeds bx; no link passes over bi
    let req = build_subtask(&task, &pbd, &[node(1)], &cfg).unwrap();
    assert_eq!(req.subtask.goal.facts(), &[fact_named(&task, "v2", "d2")]);
}

#[test]
fn crossing_facts_join_the_goal() {
    let (task, pbd) = flat("extend_chain");
    // chain a -> b -> c on v: around b, x1 comes in and x2 goes out
    let req = build_subtask(&task, &pbd, &[node(1)], &PlannerConfig::default()).unwrap();
    assert_eq!(req.subtask.goal.facts(), &[fact_named(&task, "v", "x2")]);
    assert!(req.subtask.init.contains(fact_named(&task, "v", "x1")));
}

#[test]
fn elevator_second_lift_takes_over() {
    let (task, pbd) = elevator_bd(true);
    let pairs = pbd.necessary_nonconcurrency();
    let p = &pairs[0];
    let (out, record) = resolve_nonconcurrency(&task, &pbd, p.first, p.second, &PlannerConfig::default());
    assert!(out.success, "{record:#?}");
    let c = out.plan.cflex().unwrap();
    assert_eq!((c.num(), c.den()), (26, 55));
    assert!(out.plan.plan.cost(&task) <= pbd.plan.cost(&task));
    assert!(every_execution_runs(&task, &out.plan.plan));
    let item = out.new_item.unwrap();
    let names = labels(&task, &out.plan.plan, &out.plan.plan.members(item).into_iter().map(Item::Node).collect::<Vec<_>>());
    assert!(names.iter().all(|n| n.contains("e2")), "{names:?}");
}

#[test]
fn single_lift_cannot_be_separated() {
    let (task, pbd) = elevator_bd(false);
    let pairs = pbd.necessary_nonconcurrency();
    assert!(!pairs.is_empty());
    for p in &pairs {
        for (a, b) in [(p.first, p.second), (p.second, p.first)] {
            let (out, record) = resolve_nonconcurrency(&task, &pbd, a, b, &PlannerConfig::default());
            assert!(!out.success);
            assert_eq!(out.plan, pbd);
            assert!(record.candidates.iter().all(|c| !matches!(c.verdict, CandidateVerdict::Accepted { .. })));
        }
    }
}

struct Fixed(Vec<SequentialPlan>);

impl Subplanner for Fixed {
    fn time_bound(&self) -> Duration {
        Duration::from_secs(1)
    }
    fn max_solutions(&self) -> usize {
        self.0.len()
    }
    fn solve(&self, _: &SubplanRequest) -> Result<Vec<SequentialPlan>, PlannerError> {
        Ok(self.0.clone())
    }
}

struct Broken;

impl Subplanner for Broken {
    fn time_bound(&self) -> Duration {
        Duration::from_secs(1)
    }
    fn max_solutions(&self) -> usize {
        1
    }
    fn solve(&self, _: &SubplanRequest) -> Result<Vec<SequentialPlan>, PlannerError> {
        Err(PlannerError::Exit("exit status: 3".into()))
    }
}

#[test]
fn costlier_candidate_is_refused() {
    let (task, pbd) = elevator_bd(true);
    let p = &pbd.necessary_nonconcurrency()[0];
    let ok = PlannerConfig::default().solve(&build_subtask(&task, &pbd, &[p.first], &PlannerConfig::default()).unwrap());
    let mut cand = ok.unwrap().into_iter().find(|c| c.ops().all(|o| task.op(o).name.contains("e2"))).unwrap();
    // a pointless round trip keeps the plan valid but costs two more
    let mut ops: Vec<OpId> = cand.ops().collect();
    ops.push(op_named(&task, "move_down e2 n3 n2"));
    ops.push(op_named(&task, "move_up e2 n2 n3"));
    cand = SequentialPlan::from_ops(ops);
    let (out, record) = resolve_nonconcurrency(&task, &pbd, p.first, p.second, &Fixed(vec![cand]));
    assert!(!out.success);
    assert_eq!(out.plan, pbd);
    assert!(matches!(record.candidates[0].verdict, CandidateVerdict::CostIncrease { .. }), "{record:#?}");
}

#[test]
fn planner_error_means_no_candidates() {
    let (task, pbd) = elevator_bd(true);
    let p = &pbd.necessary_nonconcurrency()[0];
    let (out, record) = resolve_nonconcurrency(&task, &pbd, p.first, p.second, &Broken);
    assert!(!out.success);
    assert_eq!(out.plan, pbd);
    assert!(record.candidates.is_empty());
    assert!(record.error.unwrap().contains("exit status: 3"));
}

#[test]
fn conflicting_candidate_is_skipped() {
    let (task, pbd) = elevator_bd(true);
    let p = &pbd.necessary_nonconcurrency()[0];
    let own: SequentialPlan = SequentialPlan::from_ops(pbd.plan.members(p.first).iter().filter_map(|&n| pbd.plan.op_of(n)));
    let (out, record) = resolve_nonconcurrency(&task, &pbd, p.first, p.second, &Fixed(vec![own]));
    assert!(!out.success);
    assert!(matches!(record.candidates[0].verdict, CandidateVerdict::Conflicting { .. }));
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn outcomes_are_valid_or_untouched(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (task, seq) = random_task_and_plan(&mut rng, 6);
            let pop = eog(&seq, &task).unwrap();
            let (bd, _) = block_deorder(&BdpoPlan::from_pop(&pop, &task).unwrap(), &task);
            let pbd = PbdPlan::new(bd, &task);
            let fixed = [Item::Node(pbd.plan.init()), Item::Node(pbd.plan.goal())];
            let items: Vec<Item> = pbd.plan.children(ROOT).iter().copied().filter(|i| !fixed.contains(i)).collect();
            let target = items[rng.gen_range(0..items.len())];
            let repl = if rng.gen_bool(0.5) {
                // the block's own operators
                SequentialPlan::from_ops(pbd.plan.reference().iter()
                    .filter(|n| pbd.plan.members(target).contains(n))
                    .filter_map(|&n| pbd.plan.op_of(n)))
            } else {
                let len = rng.gen_range(0..=3);
                SequentialPlan::from_ops((0..len).map(|_| OpId(rng.gen_range(0..task.operators.len()))))
            };
            let out = substitute(&task, &pbd, &[target], &repl);
            if out.success {
                prop_assert!(every_execution_runs(&task, &out.plan.plan));
            } else {
                prop_assert_eq!(&out.plan, &pbd);
            }
        }
    }
}


