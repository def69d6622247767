//! Graph rewrite passes: bucket planning, collective bucketing, and
//! schedule construction (vanilla and prefetching).

mod bucketing;
mod plan;
mod schedule;

pub use bucketing::apply_bucketing;
pub use plan::{manual_plan, BucketPlan};
pub use schedule::{
    forward_gather_wait, hoist_forward_gather, reorder, vanilla_schedule, Placement, ReorderPolicy, Schedule,
};
