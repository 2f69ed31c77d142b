use super::{FdrTask, PlanStep, SequentialPlan};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanParseError {
    #[error("line {line}: unknown operator `{name}`")]
    UnknownOperator { line: usize, name: String },
    #[error("line {line}: expected `(operator args...)`, found `{text}`")]
    Malformed { line: usize, text: String },
    #[error("declared cost {declared} differs from computed cost {computed}")]
    CostMismatch { declared: u64, computed: u64 },
}

fn declared_cost(comment: &str) -> Option<u64> {
    let rest = comment.trim_start_matches(';').trim();
    let rest = rest.strip_prefix("cost")?.trim_start().strip_prefix('=')?;
    rest.split_whitespace().next()?.parse().ok()
}

/// Parses an IPC plan file against the task's ground operators.
pub fn parse_plan(text: &str, task: &FdrTask) -> Result<SequentialPlan, PlanParseError> {
    let mut steps = Vec::new();
    let mut declared = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with(';') {
            if let Some(c) = declared_cost(line) {
                declared = Some(c);
            }
            continue;
        }
        if !(line.starts_with('(') && line.ends_with(')')) {
            return Err(PlanParseError::Malformed { line: i + 1, text: line.to_string() });
        }
        let op = task
            .find_operator(line)
            .ok_or_else(|| PlanParseError::UnknownOperator { line: i + 1, name: line.to_string() })?;
        steps.push(PlanStep { instance: steps.len(), op });
    }
    let plan = SequentialPlan { steps };
    if let Some(declared) = declared {
        let computed = task.plan_cost(&plan);
        if declared != computed {
            return Err(PlanParseError::CostMismatch { declared, computed });
        }
    }
    Ok(plan)
}

pub fn write_plan(plan: &SequentialPlan, task: &FdrTask) -> String {
    let mut out = String::new();
    for step in &plan.steps {
        let _ = writeln!(out, "({})", task.op(step.op).name);
    }
    let kind = if task.use_costs && !task.unit_cost_fallback() { "general" } else { "unit" };
    let _ = writeln!(out, "; cost = {} ({kind} cost)", task.plan_cost(plan));
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_tasks::*;
    use super::super::{FdrTask, OpId, PartialState, State};
    use super::*;

    fn task() -> FdrTask {
        FdrTask {
            variables: vec![var("a", 2)],
            mutex_groups: vec![],
            operators: vec![op("Flip A", &[(0, 0)], &[(0, 1)]), op("flop a", &[(0, 1)], &[(0, 0)])],
            init: State(vec![0]),
            goal: PartialState::new(),
            use_costs: false,
        }
    }

    #[test]
    fn case_insensitive_names() {
        let p = parse_plan("(flip a)\n(FLOP A)\n; cost = 2 (unit cost)\n", &task()).unwrap();
        assert_eq!(p.ops().collect::<Vec<_>>(), vec![OpId(0), OpId(1)]);
    }

    #[test]
    fn empty_file_is_empty_plan() {
        assert!(parse_plan("", &task()).unwrap().is_empty());
    }

    #[test]
    fn unknown_operator_names_line() {
        let err = parse_plan("(flip a)\n(board p9 n1 e1)\n", &task()).unwrap_err();
        assert_eq!(err, PlanParseError::UnknownOperator { line: 2, name: "(board p9 n1 e1)".into() });
    }

    #[test]
    fn cost_comment_cross_checked() {
        let err = parse_plan("(flip a)\n; cost = 5 (unit cost)\n", &task()).unwrap_err();
        assert_eq!(err, PlanParseError::CostMismatch { declared: 5, computed: 1 });
    }

    #[test]
    fn write_then_parse() {
        let t = task();
        let p = SequentialPlan::from_ops([OpId(0), OpId(1), OpId(0)]);
        assert_eq!(parse_plan(&write_plan(&p, &t), &t).unwrap(), p);
    }
}
