//! The full post-processing run and its report.

use crate::block::{block_deorder, BdpoPlan, BlockId, DeorderStats, Item, ROOT};
use crate::concurrency::{parallel_soundness_oracle, PbdPlan};
use crate::fdr::{FdrTask, SequentialPlan, VarId};
use crate::metrics::PairRatio;
use crate::pop::{eog, OrderingReason, PartialOrderPlan, PopError};
use crate::substitution::{resolve_nonconcurrency, ResolveRecord};
use crate::subplanner::Subplanner;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub const REPORT_VERSION: u32 = 1;

/// Accepted substitutions before the concurrency loop gives up.
pub const DEFAULT_MAX_SUBSTITUTIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Validate,
    Eog,
    Bd,
    Cibs,
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "validate" => Ok(Phase::Validate),
            "eog" => Ok(Phase::Eog),
            "bd" => Ok(Phase::Bd),
            "cibs" | "sc" => Ok(Phase::Cibs),
            _ => Err(format!("unknown phase {s:?} (validate, eog, bd, cibs)")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Validate => "validate",
            Phase::Eog => "eog",
            Phase::Bd => "bd",
            Phase::Cibs => "cibs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub phase: Phase,
    pub n_ops: usize,
    pub cost: u64,
    pub flex: Option<PairRatio>,
    pub cflex: Option<PairRatio>,
    pub cflex_over_flex: Option<f64>,
    pub valid: bool,
    /// Exhaustive check over legal executions; absent when over the bound.
    pub oracle: Option<bool>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub report_version: u32,
    pub phase: Phase,
    pub input_valid: bool,
    pub input_cost: u64,
    pub phases: Vec<PhaseMetrics>,
    pub deorder: Option<DeorderStats>,
    pub substitutions: SubstitutionSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SubstitutionSummary {
    pub attempted: usize,
    pub accepted: usize,
    pub records: Vec<ResolveRecord>,
}

impl PipelineReport {
    pub fn metrics(&self, phase: Phase) -> Option<&PhaseMetrics> {
        self.phases.iter().find(|m| m.phase == phase)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input plan is not valid: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Pop(#[from] PopError),
    #[error("block plan construction failed: {0}")]
    Block(#[from] crate::block::Violation),
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineOptions {
    pub phase: Phase,
    /// Largest plan (in operators) checked by enumerating executions.
    pub oracle_bound: Option<usize>,
    pub max_substitutions: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { phase: Phase::Cibs, oracle_bound: None, max_substitutions: DEFAULT_MAX_SUBSTITUTIONS }
    }
}

/// Report plus the plans produced along the way.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub pop: Option<PartialOrderPlan>,
    pub plan: Option<PbdPlan>,
}

impl PipelineRun {
    /// Most processed plan available, flattened to one block if only the
    /// partial-order phase ran.
    pub fn final_plan(&self, task: &FdrTask) -> Option<PbdPlan> {
        if let Some(p) = &self.plan {
            return Some(p.clone());
        }
        let pop = self.pop.as_ref()?;
        Some(PbdPlan::new(BdpoPlan::from_pop(pop, task).ok()?, task))
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn block_metrics(phase: Phase, pbd: &PbdPlan, task: &FdrTask, opts: &PipelineOptions, wall_ms: f64) -> PhaseMetrics {
    let flex = pbd.flex().ok();
    let cflex = pbd.cflex().ok();
    let oracle = opts.oracle_bound.and_then(|b| parallel_soundness_oracle(pbd, task, b).ok());
    PhaseMetrics {
        phase,
        n_ops: pbd.plan.num_ops(),
        cost: pbd.plan.cost(task),
        flex,
        cflex,
        cflex_over_flex: ratio(cflex, flex),
        valid: pbd.plan.check(task).is_ok() && oracle != Some(false),
        oracle,
        wall_ms,
    }
}

fn ratio(c: Option<PairRatio>, f: Option<PairRatio>) -> Option<f64> {
    match (c, f) {
        (Some(c), Some(f)) if f.num() > 0 => Some(c.value() / f.value()),
        _ => None,
    }
}

/// Runs the pipeline up to `opts.phase`.
pub fn run_pipeline(
    task: &FdrTask,
    plan: &SequentialPlan,
    planner: &dyn Subplanner,
    opts: &PipelineOptions,
) -> Result<PipelineRun, PipelineError> {
    let t = Instant::now();
    let v = task.validate(plan);
    let report = PipelineReport {
        report_version: REPORT_VERSION,
        phase: opts.phase,
        input_valid: v.valid,
        input_cost: v.cost,
        phases: vec![PhaseMetrics {
            phase: Phase::Validate,
            n_ops: plan.len(),
            cost: v.cost,
            flex: None,
            cflex: None,
            cflex_over_flex: None,
            valid: v.valid,
            oracle: None,
            wall_ms: ms(t),
        }],
        deorder: None,
        substitutions: SubstitutionSummary::default(),
    };
    if !v.valid {
        return Err(PipelineError::InvalidPlan(v.to_string()));
    }
    let mut run = PipelineRun { report, pop: None, plan: None };
    if opts.phase == Phase::Validate {
        return Ok(run);
    }

    let t = Instant::now();
    let pop = eog(plan, task)?;
    let flat = PbdPlan::new(BdpoPlan::from_pop(&pop, task)?, task);
    let mut m = block_metrics(Phase::Eog, &flat, task, opts, ms(t));
    m.valid &= pop.is_valid(task);
    run.report.phases.push(m);
    run.pop = Some(pop);
    if opts.phase == Phase::Eog {
        return Ok(run);
    }

    let t = Instant::now();
    let (bd, stats) = block_deorder(&flat.plan, task);
    let pbd = PbdPlan::new(bd, task);
    run.report.phases.push(block_metrics(Phase::Bd, &pbd, task, opts, ms(t)));
    run.report.deorder = Some(stats);
    if opts.phase == Phase::Bd {
        run.plan = Some(pbd);
        return Ok(run);
    }

    let t = Instant::now();
    let (sc, summary) = substitution_for_concurrency(task, pbd, planner, opts.max_substitutions);
    run.report.phases.push(block_metrics(Phase::Cibs, &sc, task, opts, ms(t)));
    run.report.substitutions = summary;
    run.plan = Some(sc);
    Ok(run)
}

/// Walks necessarily non-concurrent pairs from the start of the plan, trying
/// to replace the earlier item and then the later one; starts over after every
/// accepted replacement and stops after a pass with none.
pub fn substitution_for_concurrency(
    task: &FdrTask,
    mut pbd: PbdPlan,
    planner: &dyn Subplanner,
    max_substitutions: usize,
) -> (PbdPlan, SubstitutionSummary) {
    let mut summary = SubstitutionSummary::default();
    'restart: while summary.accepted < max_substitutions {
        for pair in pbd.necessary_nonconcurrency() {
            for (a, b) in [(pair.first, pair.second), (pair.second, pair.first)] {
                summary.attempted += 1;
                let (out, record) = resolve_nonconcurrency(task, &pbd, a, b, planner);
                summary.records.push(record);
                if out.success {
                    summary.accepted += 1;
                    pbd = out.plan;
                    continue 'restart;
                }
            }
        }
        break;
    }
    (pbd, summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanExport {
    pub report_version: u32,
    pub nodes: Vec<NodeExport>,
    pub blocks: Vec<BlockExport>,
    pub links: Vec<LinkExport>,
    /// Basic orderings between siblings, per block.
    pub orderings: Vec<OrderingExport>,
    pub nonconcurrent: Vec<PairExport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeExport {
    pub id: usize,
    pub label: String,
    pub block: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockExport {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<Item>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LinkExport {
    pub producer: usize,
    pub consumer: usize,
    pub fact: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderingExport {
    pub block: usize,
    pub from: Item,
    pub to: Item,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairExport {
    pub a: usize,
    pub b: usize,
    pub vars: Vec<String>,
}

fn reason_label(task: &FdrTask, r: &OrderingReason) -> String {
    format!("{:?}({})", r.kind, task.fact_name(r.fact))
}

/// Machine-readable form of a block plan.
pub fn export_plan(task: &FdrTask, pbd: &PbdPlan) -> PlanExport {
    let plan = &pbd.plan;
    let mut blocks_alive: Vec<BlockId> = vec![ROOT];
    blocks_alive.extend(plan.compound_blocks());
    let nodes = plan
        .reference()
        .iter()
        .map(|&n| NodeExport {
            id: n.0,
            label: plan.node(n).label(task),
            block: plan.parent_of(Item::Node(n)).map_or(0, |b| b.0),
        })
        .collect();
    let blocks = blocks_alive
        .iter()
        .map(|&b| BlockExport {
            id: b.0,
            parent: plan.parent_of(Item::Block(b)).map(|p| p.0),
            children: plan.children(b).to_vec(),
        })
        .collect();
    let links = plan
        .links()
        .iter()
        .map(|l| LinkExport { producer: l.producer.0, consumer: l.consumer.0, fact: task.fact_name(l.fact) })
        .collect();
    let mut orderings = Vec::new();
    for &b in &blocks_alive {
        for (from, to, reasons) in plan.basic_orderings(b) {
            let reasons = reasons.iter().map(|r| reason_label(task, r)).collect();
            orderings.push(OrderingExport { block: b.0, from, to, reasons });
        }
    }
    let var_names = |vs: &BTreeSet<VarId>| vs.iter().map(|v| task.variables[v.0].name.clone()).collect();
    let nonconcurrent = pbd.relation.iter().map(|(a, b, vs)| PairExport { a: a.0, b: b.0, vars: var_names(vs) }).collect();
    PlanExport { report_version: REPORT_VERSION, nodes, blocks, links, orderings, nonconcurrent }
}

/// Per-pair row of a batch run.
#[derive(Clone, Debug, Serialize)]
pub struct BatchRow {
    pub task: String,
    pub plan: String,
    pub report: Option<PipelineReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BatchAggregate {
    pub pairs: usize,
    pub failed: usize,
    /// Mean of cflex rescaled per problem to [0, 1] between its lowest and
    /// highest phase value.
    pub mean_normalized_cflex: Vec<(Phase, f64)>,
    pub improved_by_bd: usize,
    pub improved_by_cibs: usize,
}

/// Phase cflex values of one report rescaled to [0, 1]. A problem whose
/// phases all agree maps every phase to 1.
pub fn normalized_cflex(report: &PipelineReport) -> Vec<(Phase, f64)> {
    let vals: Vec<(Phase, f64)> = report
        .phases
        .iter()
        .filter_map(|m| m.cflex.map(|c| (m.phase, c.value())))
        .collect();
    let lo = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    vals.into_iter().map(|(p, v)| (p, if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })).collect()
}

pub fn aggregate(rows: &[BatchRow]) -> BatchAggregate {
    let mut agg = BatchAggregate { pairs: rows.len(), ..Default::default() };
    let mut sums: Vec<(Phase, f64, usize)> = Vec::new();
    for row in rows {
        let Some(r) = &row.report else {
            agg.failed += 1;
            continue;
        };
        for (p, v) in normalized_cflex(r) {
            match sums.iter_mut().find(|s| s.0 == p) {
                Some(s) => {
                    s.1 += v;
                    s.2 += 1;
                }
                None => sums.push((p, v, 1)),
            }
        }
        let c = |p| r.metrics(p).and_then(|m| m.cflex);
        if c(Phase::Bd) > c(Phase::Eog) {
            agg.improved_by_bd += 1;
        }
        if c(Phase::Cibs) > c(Phase::Bd) {
            agg.improved_by_cibs += 1;
        }
    }
    sums.sort_by_key(|s| s.0);
    agg.mean_normalized_cflex = sums.into_iter().map(|(p, s, n)| (p, s / n as f64)).collect();
    agg
}
