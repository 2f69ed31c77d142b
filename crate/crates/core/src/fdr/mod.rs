//! Finite-domain planning tasks: variables, facts, operators and sequential plans.

mod plan_io;
mod sas;

pub use plan_io::{parse_plan, write_plan, PlanParseError};
pub use sas::{parse_sas, write_sas, SasError};

use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct OpId(pub usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl OpId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Fact {
    pub var: VarId,
    pub val: usize,
}

impl Fact {
    pub fn new(var: usize, val: usize) -> Self {
        Fact { var: VarId(var), val }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    pub axiom_layer: i32,
    pub values: Vec<String>,
}

impl Variable {
    pub fn domain_size(&self) -> usize {
        self.values.len()
    }
}

/// Assignment to a subset of the variables, kept sorted by variable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartialState(Vec<Fact>);

impl PartialState {
    pub fn new() -> Self {
        PartialState(Vec::new())
    }

    /// Builds from facts; later facts on the same variable win.
    pub fn from_facts<I: IntoIterator<Item = Fact>>(facts: I) -> Self {
        let mut ps = PartialState::new();
        for f in facts {
            ps.set(f.var, f.val);
        }
        ps
    }

    pub fn get(&self, var: VarId) -> Option<usize> {
        self.0
            .binary_search_by_key(&var, |f| f.var)
            .ok()
            .map(|i| self.0[i].val)
    }

    pub fn set(&mut self, var: VarId, val: usize) {
        match self.0.binary_search_by_key(&var, |f| f.var) {
            Ok(i) => self.0[i].val = val,
            Err(i) => self.0.insert(i, Fact { var, val }),
        }
    }

    pub fn remove(&mut self, var: VarId) {
        if let Ok(i) = self.0.binary_search_by_key(&var, |f| f.var) {
            self.0.remove(i);
        }
    }

    pub fn contains(&self, fact: Fact) -> bool {
        self.get(fact.var) == Some(fact.val)
    }

    pub fn has_var(&self, var: VarId) -> bool {
        self.get(var).is_some()
    }

    pub fn facts(&self) -> &[Fact] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Fact> + '_ {
        self.0.iter().copied()
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.0.iter().map(|f| f.var)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn holds_in(&self, state: &State) -> bool {
        self.0.iter().all(|f| state.get(f.var) == f.val)
    }
}

/// Total assignment, one value per variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State(pub Vec<usize>);

impl State {
    pub fn get(&self, var: VarId) -> usize {
        self.0[var.0]
    }

    pub fn contains(&self, fact: Fact) -> bool {
        self.0[fact.var.0] == fact.val
    }

    pub fn facts(&self) -> impl Iterator<Item = Fact> + '_ {
        self.0.iter().enumerate().map(|(v, &d)| Fact::new(v, d))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operator {
    pub name: String,
    pub pre: PartialState,
    pub eff: PartialState,
    pub cost: u64,
}

impl Operator {
    /// True when some effect re-asserts its own precondition value.
    pub fn has_noop_effect(&self) -> bool {
        self.eff.iter().any(|f| self.pre.contains(f))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("operator `{op}` not applicable: precondition {var}={val} violated")]
    Inapplicable { op: String, var: String, val: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FdrTask {
    pub variables: Vec<Variable>,
    pub mutex_groups: Vec<Vec<Fact>>,
    pub operators: Vec<Operator>,
    pub init: State,
    pub goal: PartialState,
    /// Whether the metric section asked for operator costs.
    pub use_costs: bool,
}

impl FdrTask {
    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn op(&self, id: OpId) -> &Operator {
        &self.operators[id.0]
    }

    pub fn domain_size(&self, var: VarId) -> usize {
        self.variables[var.0].values.len()
    }

    pub fn all_zero_cost(&self) -> bool {
        self.use_costs && !self.operators.is_empty() && self.operators.iter().all(|o| o.cost == 0)
    }

    /// Unit costs apply when costs are disabled or all zero.
    pub fn unit_cost_fallback(&self) -> bool {
        self.all_zero_cost()
    }

    pub fn cost(&self, id: OpId) -> u64 {
        if !self.use_costs || self.all_zero_cost() {
            1
        } else {
            self.operators[id.0].cost
        }
    }

    pub fn fact_name(&self, fact: Fact) -> String {
        let var = &self.variables[fact.var.0];
        format!("{}={}", var.name, var.values[fact.val])
    }

    pub fn cons(&self, id: OpId) -> BTreeSet<Fact> {
        cons(self.op(id))
    }

    pub fn prod(&self, id: OpId) -> BTreeSet<Fact> {
        prod(self.op(id))
    }

    pub fn del(&self, id: OpId) -> BTreeSet<Fact> {
        del(self.op(id), |v| self.domain_size(v))
    }

    /// Whether `op` deletes `fact` (pessimistic reading for effects without preconditions).
    pub fn deletes(&self, id: OpId, fact: Fact) -> bool {
        op_deletes(self.op(id), fact)
    }

    pub fn is_applicable(&self, id: OpId, state: &State) -> bool {
        self.op(id).pre.holds_in(state)
    }

    pub fn apply(&self, id: OpId, state: &State) -> Result<State, ApplyError> {
        let op = self.op(id);
        if let Some(f) = op.pre.iter().find(|f| !state.contains(*f)) {
            let var = &self.variables[f.var.0];
            return Err(ApplyError::Inapplicable {
                op: op.name.clone(),
                var: var.name.clone(),
                val: var.values[f.val].clone(),
            });
        }
        Ok(self.apply_unchecked(id, state))
    }

    pub fn apply_unchecked(&self, id: OpId, state: &State) -> State {
        let mut next = state.clone();
        for f in self.op(id).eff.iter() {
            next.0[f.var.0] = f.val;
        }
        next
    }

    pub fn find_operator(&self, name: &str) -> Option<OpId> {
        let wanted = normalize_name(name);
        self.operators
            .iter()
            .position(|o| normalize_name(&o.name) == wanted)
            .map(OpId)
    }

    pub fn plan_cost(&self, plan: &SequentialPlan) -> u64 {
        plan.steps.iter().map(|s| self.cost(s.op)).sum()
    }

    pub fn validate(&self, plan: &SequentialPlan) -> ValidationReport {
        let mut state = self.init.clone();
        let mut failure = None;
        for (pos, step) in plan.steps.iter().enumerate() {
            match self.apply(step.op, &state) {
                Ok(next) => state = next,
                Err(e) => {
                    failure = Some(StepFailure { position: pos, reason: e.to_string() });
                    break;
                }
            }
        }
        let goal_reached = failure.is_none() && self.goal.holds_in(&state);
        ValidationReport {
            valid: goal_reached,
            failure,
            goal_reached,
            final_state: state,
            cost: self.plan_cost(plan),
        }
    }
}

pub(crate) fn normalize_name(name: &str) -> String {
    name.trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cons(op: &Operator) -> BTreeSet<Fact> {
    op.pre.iter().collect()
}

pub fn prod(op: &Operator) -> BTreeSet<Fact> {
    op.eff.iter().collect()
}

pub fn del(op: &Operator, domain_size: impl Fn(VarId) -> usize) -> BTreeSet<Fact> {
    let mut out = BTreeSet::new();
    for e in op.eff.iter() {
        match op.pre.get(e.var) {
            Some(d) if d != e.val => {
                out.insert(Fact { var: e.var, val: d });
            }
            Some(_) => {}
            None => {
                for d in 0..domain_size(e.var) {
                    if d != e.val {
                        out.insert(Fact { var: e.var, val: d });
                    }
                }
            }
        }
    }
    out
}

pub fn op_deletes(op: &Operator, fact: Fact) -> bool {
    match op.eff.get(fact.var) {
        Some(d) if d != fact.val => match op.pre.get(fact.var) {
            Some(p) => p == fact.val,
            None => true,
        },
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PlanStep {
    pub instance: usize,
    pub op: OpId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequentialPlan {
    pub steps: Vec<PlanStep>,
}

impl SequentialPlan {
    pub fn from_ops<I: IntoIterator<Item = OpId>>(ops: I) -> Self {
        SequentialPlan {
            steps: ops
                .into_iter()
                .enumerate()
                .map(|(instance, op)| PlanStep { instance, op })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.steps.iter().map(|s| s.op)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepFailure {
    pub position: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub valid: bool,
    pub failure: Option<StepFailure>,
    pub goal_reached: bool,
    pub final_state: State,
    pub cost: u64,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            write!(f, "valid, cost {}", self.cost)
        } else if let Some(fail) = &self.failure {
            write!(f, "invalid at step {}: {}", fail.position + 1, fail.reason)
        } else {
            write!(f, "invalid: goal not reached")
        }
    }
}
