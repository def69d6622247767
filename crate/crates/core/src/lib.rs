//! Schedule optimizer and two-stream discrete-event simulator for fully
//! sharded data parallel (FSDP) training steps.
//!
//! The pipeline is: [`model`] lowers a declarative model description into the
//! per-parameter FSDP graph, [`passes`] buckets collectives and emits
//! prefetching schedules, [`auto_wrap`] chooses bucket plans greedily under
//! time and memory constraints, and [`sim`] executes a schedule on one compute
//! stream and one FIFO communication stream.

// `!(x >= 0.0)` deliberately rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auto_wrap;
pub mod bundled;
pub mod cost;
pub mod error;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod passes;
pub mod pipeline;
pub mod sim;
pub mod testkit;
pub mod units;

pub use auto_wrap::{auto_plan, check_plan, AutoPlanReport, GreedyState, PlanViolation};
pub use cost::{CostModel, LinkParams, MemoryEvent, ProfileEntry, ProfileTable, When};
pub use error::{Error, Result};
pub use graph::{Graph, Node, NodeId, NodeKind, ParamInfo, Phase, Stream};
pub use model::{build_fsdp_graph, sharded_param_bytes, ModelSpec, ModuleSpec, ParameterSpec};
pub use passes::{
    apply_bucketing, manual_plan, reorder, vanilla_schedule, BucketPlan, Placement, ReorderPolicy, Schedule,
};
pub use pipeline::{run_scenario, Scenario};
pub use sim::{compare, simulate, Comparison, SimReport};
pub use units::Nanos;
