//! Compression plans, their feasibility rules, and the greedy search that
//! produces them.

mod plan;
mod search;

pub use plan::{
    is_feasible, validate_plan, CompressionPlan, LayerOp, PlanEntry, PlanMeta, Schedule, Violation,
};
pub use search::{search, SearchConfig, SearchOutcome};
