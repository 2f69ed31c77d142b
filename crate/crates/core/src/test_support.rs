//! Fixtures and brute-force oracles shared by unit tests.

use crate::fdr::{parse_plan, parse_sas, Fact, FdrTask, OpId, Operator, PartialState, SequentialPlan, State, Variable};
use rand::seq::SliceRandom;
use rand::Rng;

pub const ELEVATOR2_SAS: &str = include_str!("../tests/fixtures/elevator2.sas");
pub const ELEVATOR1_SAS: &str = include_str!("../tests/fixtures/elevator1.sas");
pub const ELEVATOR_PLAN: &str = include_str!("../tests/fixtures/elevator.plan");

/// Loads `tests/fixtures/<name>.sas` together with its `.plan`.
pub fn fixture(name: &str) -> (FdrTask, SequentialPlan) {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/");
    let sas = std::fs::read_to_string(format!("{dir}{name}.sas")).unwrap();
    let plan = std::fs::read_to_string(format!("{dir}{name}.plan")).unwrap();
    let task = parse_sas(&sas).unwrap();
    let plan = parse_plan(&plan, &task).unwrap();
    (task, plan)
}

pub fn elevator2() -> (FdrTask, SequentialPlan) {
    let task = parse_sas(ELEVATOR2_SAS).unwrap();
    let plan = parse_plan(ELEVATOR_PLAN, &task).unwrap();
    (task, plan)
}

pub fn elevator1() -> (FdrTask, SequentialPlan) {
    let task = parse_sas(ELEVATOR1_SAS).unwrap();
    let plan = parse_plan(ELEVATOR_PLAN, &task).unwrap();
    (task, plan)
}

pub fn op_named(task: &FdrTask, name: &str) -> OpId {
    task.find_operator(name).unwrap_or_else(|| panic!("no operator {name}"))
}

pub fn fact_named(task: &FdrTask, var: &str, val: &str) -> Fact {
    let v = task.variables.iter().position(|x| x.name == var).unwrap();
    let d = task.variables[v].values.iter().position(|x| x.contains(val)).unwrap();
    Fact::new(v, d)
}

type OpSpec<'a> = (&'a str, &'a [(usize, usize)], &'a [(usize, usize)]);

/// Task with named variables and operators given as (name, pre, eff) over value indices.
pub fn build_task(
    vars: &[(&str, usize)],
    ops: &[OpSpec],
    init: &[usize],
    goal: &[(usize, usize)],
) -> FdrTask {
    FdrTask {
        variables: vars
            .iter()
            .map(|&(n, k)| Variable {
                name: n.to_string(),
                axiom_layer: -1,
                values: (0..k).map(|i| format!("Atom {n}({i})")).collect(),
            })
            .collect(),
        mutex_groups: vec![],
        operators: ops
            .iter()
            .map(|&(n, pre, eff)| Operator {
                name: n.to_string(),
                pre: PartialState::from_facts(pre.iter().map(|&(v, d)| Fact::new(v, d))),
                eff: PartialState::from_facts(eff.iter().map(|&(v, d)| Fact::new(v, d))),
                cost: 1,
            })
            .collect(),
        init: State(init.to_vec()),
        goal: PartialState::from_facts(goal.iter().map(|&(v, d)| Fact::new(v, d))),
        use_costs: false,
    }
}

/// Random task plus a valid plan produced by a random walk; the goal is a
/// random subset of facts changed along the walk.
pub fn random_task_and_plan<R: Rng>(rng: &mut R, max_len: usize) -> (FdrTask, SequentialPlan) {
    loop {
        let nvars = rng.gen_range(2..=4);
        let doms: Vec<usize> = (0..nvars).map(|_| rng.gen_range(2..=3)).collect();
        let nops = rng.gen_range(3..=8);
        let mut operators = Vec::new();
        for i in 0..nops {
            let mut pre = PartialState::new();
            let mut eff = PartialState::new();
            for (v, &k) in doms.iter().enumerate() {
                if rng.gen_bool(0.45) {
                    pre.set(crate::fdr::VarId(v), rng.gen_range(0..k));
                }
                if rng.gen_bool(0.4) {
                    eff.set(crate::fdr::VarId(v), rng.gen_range(0..k));
                }
            }
            if eff.is_empty() {
                let v = rng.gen_range(0..nvars);
                eff.set(crate::fdr::VarId(v), rng.gen_range(0..doms[v]));
            }
            operators.push(Operator { name: format!("op{i}"), pre, eff, cost: 1 });
        }
        let init: Vec<usize> = doms.iter().map(|&k| rng.gen_range(0..k)).collect();
        let mut task = FdrTask {
            variables: doms
                .iter()
                .enumerate()
                .map(|(v, &k)| Variable {
                    name: format!("v{v}"),
                    axiom_layer: -1,
                    values: (0..k).map(|d| format!("Atom v{v}({d})")).collect(),
                })
                .collect(),
            mutex_groups: vec![],
            operators,
            init: State(init.clone()),
            goal: PartialState::new(),
            use_costs: false,
        };
        let len = rng.gen_range(1..=max_len);
        let mut state = task.init.clone();
        let mut steps = Vec::new();
        for _ in 0..len {
            let mut app: Vec<OpId> = (0..task.operators.len())
                .map(OpId)
                .filter(|&o| task.is_applicable(o, &state))
                .collect();
            if app.is_empty() {
                break;
            }
            app.shuffle(rng);
            state = task.apply_unchecked(app[0], &state);
            steps.push(app[0]);
        }
        if steps.len() < 2 {
            continue;
        }
        let mut goal = PartialState::new();
        for f in state.facts() {
            if (f.val != init[f.var.0] && rng.gen_bool(0.8)) || rng.gen_bool(0.15) {
                goal.set(f.var, f.val);
            }
        }
        task.goal = goal;
        return (task, SequentialPlan::from_ops(steps));
    }
}

/// All permutations of `items` respecting `before(a, b)` (a must precede b).
pub fn linear_extensions<T: Copy>(items: &[T], before: &dyn Fn(T, T) -> bool) -> Vec<Vec<T>> {
    fn rec<T: Copy>(rest: &mut Vec<T>, cur: &mut Vec<T>, before: &dyn Fn(T, T) -> bool, out: &mut Vec<Vec<T>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest[i];
            if rest.iter().enumerate().any(|(j, &y)| j != i && before(y, x)) {
                continue;
            }
            rest.remove(i);
            cur.push(x);
            rec(rest, cur, before, out);
            cur.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    rec(&mut items.to_vec(), &mut Vec::new(), before, &mut out);
    out
}

/// Straight-line interpreter independent of `FdrTask::validate`.
pub fn runs_to_goal(task: &FdrTask, ops: &[OpId]) -> bool {
    let mut s = task.init.0.clone();
    for &o in ops {
        let op = &task.operators[o.0];
        for f in op.pre.facts() {
            if s[f.var.0] != f.val {
                return false;
            }
        }
        for f in op.eff.facts() {
            s[f.var.0] = f.val;
        }
    }
    task.goal.facts().iter().all(|f| s[f.var.0] == f.val)
}
