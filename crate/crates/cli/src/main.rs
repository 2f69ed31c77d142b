//! `cibs`: deorder a sequential plan and raise its concurrency.

use anyhow::{anyhow, Context};
use cibs_core::fdr::SasError;
use cibs_core::pipeline::{aggregate, export_plan, BatchAggregate, BatchRow, PipelineError, REPORT_VERSION};
use cibs_core::{
    build_dtg, parse_plan, parse_sas, run_pipeline, write_plan, FdrTask, Phase, PipelineOptions, PipelineReport,
    PlannerConfig, SequentialPlan, VarId,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

/// Every option can also be set through an environment variable named after
/// it with the `CIBS_` prefix, e.g. `CIBS_TIME_BOUND=2`.
#[derive(Parser, Debug)]
#[command(name = "cibs", version, about = "Deorder plans and improve their concurrency by block substitution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the pipeline on one task and plan.
    Run(RunArgs),
    /// Run the pipeline on every (task, plan) pair of a manifest.
    Batch(BatchArgs),
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Last phase to run: validate, eog, bd or cibs.
    #[arg(long, env = "CIBS_PHASE", default_value = "cibs")]
    phase: Phase,
    /// External planner command with {task} and {plan} placeholders.
    #[arg(long, env = "CIBS_PLANNER_CMD")]
    planner_cmd: Option<String>,
    /// Seconds allowed per subtask.
    #[arg(long, env = "CIBS_TIME_BOUND", default_value_t = 5.0)]
    time_bound: f64,
    /// Candidate subplans considered per subtask.
    #[arg(long, env = "CIBS_MAX_SOLUTIONS", default_value_t = 10)]
    max_solutions: usize,
    /// Check plans with up to this many operators by enumerating executions.
    #[arg(long, env = "CIBS_ORACLE_BOUND")]
    oracle_bound: Option<usize>,
    /// Stop the substitution loop after this many accepted replacements.
    #[arg(long, env = "CIBS_MAX_SUBSTITUTIONS", default_value_t = cibs_core::pipeline::DEFAULT_MAX_SUBSTITUTIONS)]
    max_substitutions: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, env = "CIBS_TASK")]
    task: PathBuf,
    #[arg(long, env = "CIBS_PLAN")]
    plan: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write the JSON report here.
    #[arg(long, env = "CIBS_JSON")]
    json: Option<PathBuf>,
    /// Write the final plan as JSON here, plus a witness linearization at <path>.plan.
    #[arg(long, env = "CIBS_OUT_PLAN")]
    out_plan: Option<PathBuf>,
    /// Write one Graphviz file per variable into this directory.
    #[arg(long, env = "CIBS_EMIT_DTG_DOT")]
    emit_dtg_dot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// Lines of `<task> <plan>`; relative paths resolve against the manifest.
    #[arg(long, env = "CIBS_MANIFEST")]
    manifest: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Pairs processed in parallel.
    #[arg(long, env = "CIBS_JOBS", default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = "CIBS_JSON")]
    json: Option<PathBuf>,
}

/// Failure classes with their exit codes.
enum Failure {
    Invalid(anyhow::Error),
    Unsupported(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

impl PipelineArgs {
    fn planner(&self) -> anyhow::Result<PlannerConfig> {
        let mut cfg = match &self.planner_cmd {
            Some(cmd) => PlannerConfig::external(cmd)?,
            None => PlannerConfig::default(),
        };
        if !(self.time_bound.is_finite() && self.time_bound > 0.0) {
            return Err(anyhow!("time bound must be positive"));
        }
        cfg.time_bound = Duration::from_secs_f64(self.time_bound);
        cfg.max_solutions = self.max_solutions;
        Ok(cfg)
    }

    fn options(&self) -> PipelineOptions {
        PipelineOptions { phase: self.phase, oracle_bound: self.oracle_bound, max_substitutions: self.max_substitutions }
    }
}

fn load(task: &Path, plan: &Path) -> Result<(FdrTask, SequentialPlan), Failure> {
    let text = std::fs::read_to_string(task).with_context(|| format!("reading {}", task.display()))?;
    let task_v = parse_sas(&text).map_err(|e| {
        let e2 = anyhow!("{}: {e}", task.display());
        match e {
            SasError::Unsupported { .. } => Failure::Unsupported(e2),
            _ => Failure::Invalid(e2),
        }
    })?;
    let text = std::fs::read_to_string(plan).with_context(|| format!("reading {}", plan.display()))?;
    let p = parse_plan(&text, &task_v).map_err(|e| anyhow!("{}: {e}", plan.display()))?;
    Ok((task_v, p))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn summary(report: &PipelineReport) -> String {
    let mut out = String::new();
    for m in &report.phases {
        if m.phase == Phase::Validate {
            let verdict = if m.valid { "valid" } else { "invalid" };
            out += &format!("{:<9} {verdict}, cost {}\n", m.phase.to_string(), m.cost);
            continue;
        }
        let show = |r: Option<cibs_core::PairRatio>| r.map_or("-".to_string(), |r| r.to_string());
        out += &format!(
            "{:<9} ops {:>3}  cost {:>4}  flex {}  cflex {}{}\n",
            m.phase.to_string(),
            m.n_ops,
            m.cost,
            show(m.flex),
            show(m.cflex),
            if m.valid { "" } else { "  INVALID" },
        );
    }
    let s = &report.substitutions;
    if report.phase == Phase::Cibs {
        out += &format!("substitutions: {} accepted of {} attempted\n", s.accepted, s.attempted);
    }
    out
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (task, plan) = load(&args.task, &args.plan)?;
    let planner = args.pipeline.planner()?;
    if let Some(dir) = &args.emit_dtg_dot {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for v in 0..task.num_vars() {
            let name: String = task.variables[v]
                .name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                .collect();
            let path = dir.join(format!("{v:03}_{name}.dot"));
            std::fs::write(&path, build_dtg(&task, VarId(v)).to_dot(&task))
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let run = match run_pipeline(&task, &plan, &planner, &args.pipeline.options()) {
        Ok(r) => r,
        Err(PipelineError::InvalidPlan(msg)) => {
            println!("{:<9} invalid: {msg}", "validate");
            return Err(Failure::Invalid(anyhow!("plan is not valid for the task")));
        }
        Err(e) => return Err(Failure::Invalid(e.into())),
    };
    print!("{}", summary(&run.report));
    if let Some(path) = &args.json {
        write_json(path, &run.report)?;
    }
    if let Some(path) = &args.out_plan {
        let pbd = run.final_plan(&task).ok_or_else(|| anyhow!("--out-plan needs a phase after validate"))?;
        write_json(path, &export_plan(&task, &pbd))?;
        let mut witness = path.as_os_str().to_owned();
        witness.push(".plan");
        std::fs::write(&witness, write_plan(&pbd.plan.witness(), &task)).context("writing witness plan")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BatchOutput<'a> {
    report_version: u32,
    rows: &'a [BatchRow],
    aggregate: &'a BatchAggregate,
}

fn read_manifest(path: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let [t, p] = words.as_slice() else {
            return Err(anyhow!("{}:{}: expected `<task> <plan>`", path.display(), i + 1));
        };
        out.push((base.join(t), base.join(p)));
    }
    Ok(out)
}

fn cmd_batch(args: &BatchArgs) -> Result<(), Failure> {
    let pairs = read_manifest(&args.manifest)?;
    let planner = args.pipeline.planner()?;
    let opts = args.pipeline.options();
    let one = |(t, p): &(PathBuf, PathBuf)| {
        let result = load(t, p)
            .map_err(|f| match f {
                Failure::Invalid(e) | Failure::Unsupported(e) => e.to_string(),
            })
            .and_then(|(task, plan)| run_pipeline(&task, &plan, &planner, &opts).map_err(|e| e.to_string()));
        let (report, error) = match result {
            Ok(run) => (Some(run.report), None),
            Err(e) => (None, Some(e)),
        };
        BatchRow { task: t.display().to_string(), plan: p.display().to_string(), report, error }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let rows: Vec<BatchRow> = pool.install(|| pairs.par_iter().map(one).collect());
    let agg = aggregate(&rows);
    for row in &rows {
        match (&row.report, &row.error) {
            (Some(r), _) => {
                let c = |ph| r.metrics(ph).and_then(|m| m.cflex).map_or("-".into(), |c| format!("{:.4}", c.value()));
                println!("ok      {}  eog {}  bd {}  cibs {}", row.task, c(Phase::Eog), c(Phase::Bd), c(Phase::Cibs));
            }
            (None, Some(e)) => println!("failed  {}  {e}", row.task),
            (None, None) => unreachable!(),
        }
    }
    println!("pairs {}  failed {}  improved by bd {}  improved by cibs {}", agg.pairs, agg.failed, agg.improved_by_bd, agg.improved_by_cibs);
    for (p, v) in &agg.mean_normalized_cflex {
        println!("mean normalized cflex {:<9} {v:.4}", p.to_string());
    }
    if let Some(path) = &args.json {
        write_json(path, &BatchOutput { report_version: REPORT_VERSION, rows: &rows, aggregate: &agg })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Batch(a) => cmd_batch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Unsupported(e)) => {
            eprintln!("unsupported: {e:#}");
            ExitCode::from(2)
        }
    }
}
