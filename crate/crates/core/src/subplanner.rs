//! Producers of candidate subplans for substitution subtasks.

use crate::fdr::{parse_plan, write_sas, FdrTask, OpId, SequentialPlan, State};
use serde::Serialize;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

pub const DEFAULT_TIME_BOUND: Duration = Duration::from_secs(5);
pub const DEFAULT_MAX_SOLUTIONS: usize = 10;
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

/// A planning problem carved out of the main task around one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubplanRequest {
    pub subtask: FdrTask,
    /// Cost of the block being replaced.
    pub cost_bound: u64,
    pub time_bound: Duration,
    pub max_solutions: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("bad planner command template: {0}")]
    Template(String),
    #[error("could not run planner: {0}")]
    Io(#[from] std::io::Error),
    #[error("planner exited with {0}")]
    Exit(String),
    #[error("planner exceeded {0:?}")]
    Timeout(Duration),
}

pub trait Subplanner {
    fn time_bound(&self) -> Duration;
    fn max_solutions(&self) -> usize;
    /// Valid plans for the subtask within the cost bound, cheapest first.
    fn solve(&self, req: &SubplanRequest) -> Result<Vec<SequentialPlan>, PlannerError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    Internal,
    External { command: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    pub time_bound: Duration,
    pub max_solutions: usize,
    pub node_budget: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            mode: PlannerMode::Internal,
            time_bound: DEFAULT_TIME_BOUND,
            max_solutions: DEFAULT_MAX_SOLUTIONS,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }
}

impl PlannerConfig {
    pub fn external(command: &str) -> Result<Self, PlannerError> {
        if !command.contains("{task}") || !command.contains("{plan}") {
            return Err(PlannerError::Template("needs {task} and {plan} placeholders".into()));
        }
        Ok(PlannerConfig { mode: PlannerMode::External { command: command.to_string() }, ..Default::default() })
    }
}

impl Subplanner for PlannerConfig {
    fn time_bound(&self) -> Duration {
        self.time_bound
    }

    fn max_solutions(&self) -> usize {
        self.max_solutions
    }

    fn solve(&self, req: &SubplanRequest) -> Result<Vec<SequentialPlan>, PlannerError> {
        let plans = match &self.mode {
            PlannerMode::Internal => search(req, self.node_budget),
            PlannerMode::External { command } => run_external(req, command)?,
        };
        Ok(finish(req, plans))
    }
}

/// Keeps valid, affordable, distinct plans sorted by cost then operator names.
fn finish(req: &SubplanRequest, plans: Vec<SequentialPlan>) -> Vec<SequentialPlan> {
    let task = &req.subtask;
    let mut seen = HashSet::new();
    let mut keyed: Vec<(u64, Vec<String>, SequentialPlan)> = Vec::new();
    for p in plans {
        let report = task.validate(&p);
        if !report.valid || report.cost > req.cost_bound {
            continue;
        }
        let mut bag: Vec<OpId> = p.ops().collect();
        bag.sort();
        if !seen.insert(bag) {
            continue;
        }
        let names = p.ops().map(|o| task.op(o).name.clone()).collect();
        keyed.push((report.cost, names, p));
    }
    keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    keyed.into_iter().take(req.max_solutions).map(|k| k.2).collect()
}

struct Node {
    state: State,
    parent: Option<usize>,
    op: Option<OpId>,
    bag: Vec<OpId>,
}

/// Uniform-cost search that may expand a state once per distinct operator
/// multiset (at most `max_solutions` times), so cheap alternatives surface.
fn search(req: &SubplanRequest, node_budget: usize) -> Vec<SequentialPlan> {
    let task = &req.subtask;
    let k = req.max_solutions.max(1);
    let started = Instant::now();
    let mut nodes = vec![Node { state: task.init.clone(), parent: None, op: None, bag: Vec::new() }];
    let mut open = BinaryHeap::from([Reverse((0u64, 0usize))]);
    let mut expanded: HashMap<State, Vec<Vec<OpId>>> = HashMap::new();
    let mut found: HashSet<Vec<OpId>> = HashSet::new();
    let mut out = Vec::new();
    let mut pops = 0usize;
    while let Some(Reverse((g, i))) = open.pop() {
        pops += 1;
        if pops % 256 == 0 && started.elapsed() > req.time_bound {
            break;
        }
        if task.goal.holds_in(&nodes[i].state) && found.insert(nodes[i].bag.clone()) {
            out.push(path(&nodes, i));
            if out.len() >= k {
                break;
            }
        }
        let seen = expanded.entry(nodes[i].state.clone()).or_default();
        if seen.len() >= k || seen.contains(&nodes[i].bag) {
            continue;
        }
        seen.push(nodes[i].bag.clone());
        for o in 0..task.operators.len() {
            let o = OpId(o);
            let g2 = g + task.cost(o);
            if g2 > req.cost_bound || !task.is_applicable(o, &nodes[i].state) {
                continue;
            }
            let mut bag = nodes[i].bag.clone();
            let at = bag.partition_point(|&x| x <= o);
            bag.insert(at, o);
            let state = task.apply_unchecked(o, &nodes[i].state);
            nodes.push(Node { state, parent: Some(i), op: Some(o), bag });
            open.push(Reverse((g2, nodes.len() - 1)));
        }
        if nodes.len() > node_budget {
            break;
        }
    }
    out
}

fn path(nodes: &[Node], mut i: usize) -> SequentialPlan {
    let mut ops = Vec::new();
    while let Some(o) = nodes[i].op {
        ops.push(o);
        i = nodes[i].parent.unwrap();
    }
    ops.reverse();
    SequentialPlan::from_ops(ops)
}

fn run_external(req: &SubplanRequest, template: &str) -> Result<Vec<SequentialPlan>, PlannerError> {
    let dir = tempfile::tempdir()?;
    let task_path = dir.path().join("subtask.sas");
    let plan_path = dir.path().join("subplan");
    std::fs::write(&task_path, write_sas(&req.subtask))?;
    let words = shell_words::split(template).map_err(|e| PlannerError::Template(e.to_string()))?;
    let args: Vec<String> = words
        .iter()
        .map(|w| w.replace("{task}", &task_path.to_string_lossy()).replace("{plan}", &plan_path.to_string_lossy()))
        .collect();
    let (prog, rest) = args.split_first().ok_or_else(|| PlannerError::Template("empty command".into()))?;
    let mut child = Command::new(prog)
        .args(rest)
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?;
    let deadline = Instant::now() + req.time_bound;
    let status = loop {
        if let Some(s) = child.try_wait()? {
            break s;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(PlannerError::Timeout(req.time_bound));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    if !status.success() {
        return Err(PlannerError::Exit(status.to_string()));
    }
    Ok(read_plans(&plan_path, &req.subtask))
}

/// Reads `plan` and its numbered siblings `plan.1`, `plan.2`, ...
fn read_plans(base: &Path, task: &FdrTask) -> Vec<SequentialPlan> {
    let mut paths = vec![base.to_path_buf()];
    for i in 1.. {
        let p = base.with_file_name(format!("{}.{i}", base.file_name().unwrap().to_string_lossy()));
        if !p.exists() {
            break;
        }
        paths.push(p);
    }
    paths
        .iter()
        .filter_map(|p| std::fs::read_to_string(p).ok())
        .filter_map(|text| parse_plan(&text, task).ok())
        .collect()
}
