//! Headline acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use cibs_core::fdr::{OpId, Operator, PartialState, State, Variable};
use cibs_core::{
    block_deorder, build_dtg, eog, extend, op_conflict_vars, parallel_soundness_oracle, parse_plan, parse_sas,
    resolve_nonconcurrency, run_pipeline, substitute, BdpoPlan, FdrTask, Item, NodeId, PairRatio, PbdPlan,
    Phase, PipelineOptions, PlannerConfig, SequentialPlan, VarId,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::AssertUnwindSafe;
use std::time::Instant;

const FIXTURES: [&str; 5] = ["elevator2", "elevator1", "substitute_chain", "extend_chain", "extend_dtg"];

fn load(name: &str) -> (FdrTask, SequentialPlan) {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/");
    let sas = std::fs::read_to_string(format!("{dir}{name}.sas")).unwrap();
    let plan_file = if name.starts_with("elevator") { "elevator".to_string() } else { name.to_string() };
    let plan = std::fs::read_to_string(format!("{dir}{plan_file}.plan")).unwrap();
    let task = parse_sas(&sas).unwrap();
    let plan = parse_plan(&plan, &task).unwrap();
    (task, plan)
}

fn ratio(r: PairRatio) -> (u64, u64) {
    (r.num(), r.den())
}

/// a <= b as rationals.
fn le(a: PairRatio, b: PairRatio) -> bool {
    a.num() as u128 * b.den() as u128 <= b.num() as u128 * a.den() as u128
}

/// Straight-line interpreter kept apart from the library's own validator.
fn runs_to_goal(task: &FdrTask, ops: &[OpId]) -> bool {
    let mut s = task.init.0.clone();
    for &o in ops {
        let op = &task.operators[o.0];
        if op.pre.facts().iter().any(|f| s[f.var.0] != f.val) {
            return false;
        }
        for f in op.eff.facts() {
            s[f.var.0] = f.val;
        }
    }
    task.goal.facts().iter().all(|f| s[f.var.0] == f.val)
}

fn linear_extensions(items: &[NodeId], before: &dyn Fn(NodeId, NodeId) -> bool, out: &mut Vec<Vec<NodeId>>, cur: &mut Vec<NodeId>) {
    if cur.len() == items.len() {
        out.push(cur.clone());
        return;
    }
    for &x in items {
        if cur.contains(&x) || items.iter().any(|&y| y != x && !cur.contains(&y) && before(y, x)) {
            continue;
        }
        cur.push(x);
        linear_extensions(items, before, out, cur);
        cur.pop();
    }
}

fn every_execution_runs(task: &FdrTask, plan: &BdpoPlan) -> bool {
    plan.legal_executions(1 << 20).expect("small plan").iter().all(|ex| {
        let ops: Vec<OpId> = ex.iter().filter_map(|&n| plan.op_of(n)).collect();
        runs_to_goal(task, &ops)
    })
}

fn variables(doms: &[usize]) -> Vec<Variable> {
    doms.iter()
        .enumerate()
        .map(|(v, &k)| Variable { name: format!("v{v}"), axiom_layer: -1, values: (0..k).map(|d| format!("Atom v{v}({d})")).collect() })
        .collect()
}

fn random_op<R: Rng>(rng: &mut R, doms: &[usize], name: String) -> Operator {
    let mut pre = PartialState::new();
    let mut eff = PartialState::new();
    for (v, &k) in doms.iter().enumerate() {
        if rng.gen_bool(0.45) {
            pre.set(VarId(v), rng.gen_range(0..k));
        }
        if rng.gen_bool(0.4) {
            eff.set(VarId(v), rng.gen_range(0..k));
        }
    }
    if eff.is_empty() {
        let v = rng.gen_range(0..doms.len());
        eff.set(VarId(v), rng.gen_range(0..doms[v]));
    }
    Operator { name, pre, eff, cost: 1 }
}

/// Random task with a plan found by a random walk; the goal is drawn from the
/// facts the walk changed.
fn random_task<R: Rng>(rng: &mut R, max_vars: usize, max_dom: usize, max_ops: usize, max_len: usize) -> (FdrTask, SequentialPlan) {
    loop {
        let doms: Vec<usize> = (0..rng.gen_range(2..=max_vars)).map(|_| rng.gen_range(2..=max_dom)).collect();
        let operators: Vec<Operator> = (0..rng.gen_range(2..=max_ops)).map(|i| random_op(rng, &doms, format!("op{i}"))).collect();
        let init: Vec<usize> = doms.iter().map(|&k| rng.gen_range(0..k)).collect();
        let mut task = FdrTask {
            variables: variables(&doms),
            mutex_groups: vec![],
            operators,
            init: State(init.clone()),
            goal: PartialState::new(),
            use_costs: false,
        };
        let mut state = task.init.clone();
        let mut steps = Vec::new();
        for _ in 0..rng.gen_range(1..=max_len) {
            let app: Vec<OpId> = (0..task.operators.len()).map(OpId).filter(|&o| task.is_applicable(o, &state)).collect();
            let Some(&o) = app.choose(rng) else { break };
            state = task.apply_unchecked(o, &state);
            steps.push(o);
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

fn elevator_headline() -> Result<(), String> {
    let (task, plan) = load("elevator2");
    let start = Instant::now();
    let opts = PipelineOptions { oracle_bound: Some(11), ..PipelineOptions::default() };
    let run = run_pipeline(&task, &plan, &PlannerConfig::default(), &opts).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let m = |p| run.report.metrics(p).unwrap().clone();
    let (e, b, c) = (m(Phase::Eog), m(Phase::Bd), m(Phase::Cibs));
    let got = |r: Option<PairRatio>| r.map(ratio);
    let checks = [
        (got(e.flex) == Some((2, 55)), format!("flex eog {:?}", got(e.flex))),
        (got(e.cflex) == Some((2, 55)), format!("cflex eog {:?}", got(e.cflex))),
        (got(b.flex) == Some((26, 55)), format!("flex bd {:?}", got(b.flex))),
        (got(b.cflex) == Some((2, 55)), format!("cflex bd {:?}", got(b.cflex))),
        (c.cflex.is_some_and(|r| (r.value() - 0.47).abs() <= 0.03), format!("cflex cibs {:?}", c.cflex.map(|r| r.value()))),
        (c.cost <= run.report.input_cost, format!("cost {} vs {}", c.cost, run.report.input_cost)),
        (c.valid && c.oracle == Some(true), "final plan not sound".into()),
        (secs < 5.0, format!("took {secs:.2}s")),
    ];
    match checks.iter().find(|(ok, _)| !ok) {
        None => Ok(()),
        Some((_, why)) => Err(why.clone()),
    }
}

fn conflict_pairs() -> Result<(), String> {
    let (task, _) = load("elevator2");
    let names = |a: &str, b: &str| -> Vec<String> {
        let op = |n: &str| task.op(task.find_operator(n).unwrap());
        op_conflict_vars(op(a), op(b)).into_iter().map(|v| task.variables[v.0].name.clone()).collect()
    };
    let cases: [(&str, &str, &[&str]); 4] = [
        ("board p1 n1 e1", "board p2 n2 e1", &["v_e1"]),
        ("board p1 n1 e1", "board p2 n1 e1", &[]),
        ("move_up e1 n2 n3", "move_down e1 n2 n1", &["v_e1"]),
        ("move_up e1 n2 n3", "move_up e2 n2 n3", &[]),
    ];
    for (a, b, want) in cases {
        let got = names(a, b);
        if got != want {
            return Err(format!("({a}, {b}) gave {got:?}"));
        }
    }
    Ok(())
}

fn safe_transitions_and_extend() -> Result<(), String> {
    let (task, seq) = load("extend_dtg");
    let pop = eog(&seq, &task).map_err(|e| e.to_string())?;
    let mut plan = BdpoPlan::from_pop(&pop, &task).map_err(|e| e.to_string())?;
    let node = |i: usize| Item::Node(NodeId(i + 1));
    let b_i = plan.group(&task, &[node(1), node(2)]).map_err(|e| e.to_string())?;
    let pbd = PbdPlan::new(plan, &task);
    let bj = task.op(task.find_operator("bj").unwrap());
    let v2 = VarId(task.variables.iter().position(|v| v.name == "v2").unwrap());
    let val = |x: &str| task.variables[v2.0].values.iter().position(|s| s.contains(x)).unwrap();
    let dtg = build_dtg(&task, v2);
    let allowed = |o: OpId| op_conflict_vars(task.op(o), bj).is_empty();
    if dtg.safe_transition_exists(val("d1"), val("d2"), allowed) {
        return Err("d1 -> d2 should be unsafe".into());
    }
    if !dtg.safe_transition_exists(val("d1"), val("d3"), allowed) {
        return Err("d1 -> d3 should be safe".into());
    }
    let ext = extend(&task, &pbd, b_i, node(3)).map_err(|e| e.to_string())?;
    if ext.absorbed != vec![node(4)] {
        return Err(format!("absorbed {:?}", ext.absorbed));
    }
    Ok(())
}

fn deordering_soundness() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..250 {
        let (task, seq) = random_task(&mut rng, 4, 3, 8, 8);
        let pop = eog(&seq, &task).map_err(|e| e.to_string())?;
        let ops: Vec<NodeId> = pop.op_nodes().collect();
        let mut lins = Vec::new();
        linear_extensions(&ops, &|a, b| pop.precedes(a, b), &mut lins, &mut Vec::new());
        for lin in &lins {
            let o: Vec<OpId> = lin.iter().map(|&n| pop.node(n).op().unwrap()).collect();
            if !runs_to_goal(&task, &o) {
                return Err(format!("task {i}: partial-order linearization {o:?} fails"));
            }
        }
        let flat = BdpoPlan::from_pop(&pop, &task).map_err(|e| e.to_string())?;
        let (bd, _) = block_deorder(&flat, &task);
        if !every_execution_runs(&task, &bd) {
            return Err(format!("task {i}: a block execution fails"));
        }
    }
    Ok(())
}

/// Both orders succeed from some state where both apply, and agree in every such state.
fn swap_equivalent(doms: &[usize], a: &Operator, b: &Operator) -> bool {
    let task = FdrTask {
        variables: variables(doms),
        mutex_groups: vec![],
        operators: vec![a.clone(), b.clone()],
        init: State(vec![0; doms.len()]),
        goal: PartialState::new(),
        use_costs: false,
    };
    let total: usize = doms.iter().product();
    let mut joint = false;
    for mut code in 0..total {
        let s = State(doms.iter().map(|&k| { let d = code % k; code /= k; d }).collect());
        if !task.is_applicable(OpId(0), &s) || !task.is_applicable(OpId(1), &s) {
            continue;
        }
        joint = true;
        let ab = task.apply(OpId(0), &s).ok().and_then(|t| task.apply(OpId(1), &t).ok());
        let ba = task.apply(OpId(1), &s).ok().and_then(|t| task.apply(OpId(0), &t).ok());
        if ab.is_none() || ab != ba {
            return false;
        }
    }
    joint
}

fn all_ops(doms: &[usize]) -> Vec<Operator> {
    let slots: usize = doms.iter().map(|&k| (k + 1) * (k + 1)).product();
    let mut out = Vec::new();
    for mut code in 0..slots {
        let mut pre = PartialState::new();
        let mut eff = PartialState::new();
        for (v, &k) in doms.iter().enumerate() {
            let (p, e) = (code % (k + 1), (code / (k + 1)) % (k + 1));
            code /= (k + 1) * (k + 1);
            if p > 0 {
                pre.set(VarId(v), p - 1);
            }
            if e > 0 {
                eff.set(VarId(v), e - 1);
            }
        }
        out.push(Operator { name: "o".into(), pre, eff, cost: 1 });
    }
    out
}

fn micro_parallel_soundness() -> Result<(), String> {
    let check = |doms: &[usize], a: &Operator, b: &Operator| -> Result<(), String> {
        let empty = op_conflict_vars(a, b).is_empty();
        if empty != swap_equivalent(doms, a, b) {
            return Err(format!("mismatch for {a:?} / {b:?}"));
        }
        Ok(())
    };
    let doms = [3, 2];
    let ops = all_ops(&doms);
    for a in &ops {
        for b in &ops {
            check(&doms, a, b)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20_000 {
        let doms: Vec<usize> = (0..3).map(|_| rng.gen_range(2..=3)).collect();
        let a = random_op(&mut rng, &doms, "a".into());
        let b = random_op(&mut rng, &doms, "b".into());
        check(&doms, &a, &b)?;
    }
    for i in 0..300 {
        let (task, seq) = random_task(&mut rng, 3, 3, 4, 4);
        let pop = eog(&seq, &task).map_err(|e| e.to_string())?;
        let (bd, _) = block_deorder(&BdpoPlan::from_pop(&pop, &task).map_err(|e| e.to_string())?, &task);
        let pbd = PbdPlan::new(bd, &task);
        if parallel_soundness_oracle(&pbd, &task, 8) != Ok(true) {
            return Err(format!("micro task {i}: concurrent pair is not interchangeable"));
        }
    }
    Ok(())
}

fn monotone_and_atomic() -> Result<(), String> {
    let planner = PlannerConfig::default();
    let mut rejected = 0;
    for name in FIXTURES {
        let (task, seq) = load(name);
        let pop = eog(&seq, &task).map_err(|e| e.to_string())?;
        let flat = PbdPlan::new(BdpoPlan::from_pop(&pop, &task).map_err(|e| e.to_string())?, &task);
        let (bd, _) = block_deorder(&flat.plan, &task);
        let mut cur = PbdPlan::new(bd, &task);
        if !le(flat.cflex().unwrap(), cur.cflex().unwrap()) {
            return Err(format!("{name}: block deordering lowered cflex"));
        }
        let mut rounds = 0;
        'restart: while rounds < 20 {
            rounds += 1;
            for pair in cur.necessary_nonconcurrency() {
                for (x, y) in [(pair.first, pair.second), (pair.second, pair.first)] {
                    let (out, _) = resolve_nonconcurrency(&task, &cur, x, y, &planner);
                    if !out.success {
                        rejected += 1;
                        if out.plan != cur {
                            return Err(format!("{name}: rejected resolve changed the plan"));
                        }
                        continue;
                    }
                    let (before, after) = (cur.cflex().unwrap(), out.plan.cflex().unwrap());
                    if !le(before, after) || before == after {
                        return Err(format!("{name}: accepted resolve did not raise cflex"));
                    }
                    if out.plan.plan.cost(&task) > cur.plan.cost(&task) {
                        return Err(format!("{name}: accepted resolve raised cost"));
                    }
                    if !every_execution_runs(&task, &out.plan.plan) {
                        return Err(format!("{name}: accepted resolve broke an execution"));
                    }
                    cur = out.plan;
                    continue 'restart;
                }
            }
            break;
        }
        // A replacement that undoes every effect of a block cannot be accepted.
        for item in cur.plan.children(cibs_core::block::ROOT).to_vec() {
            if matches!(item, Item::Node(n) if n == cur.plan.init() || n == cur.plan.goal()) {
                continue;
            }
            let bogus = SequentialPlan::from_ops([OpId(0), OpId(0), OpId(0)]);
            let out = substitute(&task, &cur, &[item], &bogus);
            rejected += usize::from(!out.success);
            if !out.success && out.plan != cur {
                return Err(format!("{name}: rejected substitution changed the plan"));
            }
            if out.success && !every_execution_runs(&task, &out.plan.plan) {
                return Err(format!("{name}: accepted substitution broke an execution"));
            }
        }
    }
    if rejected == 0 {
        return Err("no rejection was exercised".into());
    }
    Ok(())
}

type Check = fn() -> Result<(), String>;

fn main() {
    let criteria: [(&str, Check); 6] = [
        ("elevator flexibility, concurrency, cost and runtime", elevator_headline),
        ("operator conflict pairs", conflict_pairs),
        ("safe transitions and extension", safe_transitions_and_extend),
        ("deordering soundness on random tasks", deordering_soundness),
        ("micro-task parallel soundness", micro_parallel_soundness),
        ("substitution monotonicity and failure atomicity", monotone_and_atomic),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(()) => println!("PASS {} {name}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
