//! Build → bucket → schedule → simulate, as one call.

use crate::cost::CostModel;
use crate::error::Result;
use crate::graph::Graph;
use crate::model::{build_fsdp_graph, ModelSpec};
use crate::passes::{apply_bucketing, reorder, vanilla_schedule, BucketPlan, ReorderPolicy, Schedule};
use crate::sim::{simulate, SimReport};

#[derive(Clone, Debug)]
pub struct Scenario {
    pub graph: Graph,
    pub schedule: Schedule,
    pub report: SimReport,
}

/// Runs one configuration. `plan = None` keeps per-parameter collectives;
/// `policy = None` keeps the unprefetched program order.
pub fn run_scenario(
    spec: &ModelSpec,
    model: &CostModel,
    plan: Option<&BucketPlan>,
    policy: Option<ReorderPolicy>,
) -> Result<Scenario> {
    let base = build_fsdp_graph(spec)?;
    run_on_graph(&base, spec, model, plan, policy)
}

pub fn run_on_graph(
    base: &Graph,
    spec: &ModelSpec,
    model: &CostModel,
    plan: Option<&BucketPlan>,
    policy: Option<ReorderPolicy>,
) -> Result<Scenario> {
    let graph = match plan {
        Some(p) => apply_bucketing(base, p)?,
        None => base.clone(),
    };
    let schedule = match policy {
        Some(p) => reorder(&graph, p)?,
        None => vanilla_schedule(&graph)?,
    };
    let report = simulate(&schedule, &graph, model, spec)?;
    Ok(Scenario { graph, schedule, report })
}
