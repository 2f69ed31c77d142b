//! Plan post-processing: explanation-based deordering, block deordering and
//! concurrency improvement by substituting blocks with conflict-free subplans.

pub mod bits;
pub mod block;
pub mod concurrency;
pub mod dtg;
pub mod fdr;
pub mod metrics;

pub use fdr::{
    parse_plan, parse_sas, write_plan, write_sas, Fact, FdrTask, OpId, Operator, PartialState,
    PlanStep, SequentialPlan, State, VarId, Variable,
};
pub use metrics::{PairRatio, UndefinedMetric};
pub mod pipeline;
pub mod pop;
pub mod subplanner;
pub mod substitution;

#[cfg(test)]
pub(crate) mod test_support;

pub use pop::{eog, CausalLink, NodeId, OrderingReason, PartialOrderPlan, PlanNode, PopError, ReasonKind};
pub use block::{block_deorder, BdpoPlan, BlockId, DeorderStats, Item, Semantics, Violation};
pub use concurrency::{op_conflict_vars, parallel_soundness_oracle, NecessaryPair, NonConcurrencyRelation, OracleSkipped, PbdPlan};
pub use dtg::{build_dtg, extend, DomainTransitionGraph, ExtendError, Extension};
pub use subplanner::{PlannerConfig, PlannerError, PlannerMode, SubplanRequest, Subplanner};
pub use substitution::{build_subtask, resolve_nonconcurrency, substitute, CandidateVerdict, ResolveRecord, SubstitutionOutcome, SubtaskError, TraceEvent};
pub use pipeline::{run_pipeline, substitution_for_concurrency, Phase, PipelineError, PipelineOptions, PipelineReport, PipelineRun};
