//! Greedy bucket planning under overlap and memory constraints.
//!
//! Parameters are visited in forward order. A parameter joins the open
//! bucket only if the merged all-gather still hides under the compute it
//! overlaps (in both phases) and the prefetched compute memory stays within
//! the limit; otherwise the bucket closes and the parameter opens a new one.

use std::fmt::{self, Write as _};

use crate::cost::{CostModel, ProfileEntry, ProfileTable};
use crate::error::{Error, Result};
use crate::graph::Phase;
use crate::model::ModelSpec;
use crate::passes::BucketPlan;
use crate::units::Nanos;

/// Time of one collective over the concatenation of `k` members whose
/// individual times sum to `sum`: the base latency is paid once.
fn merged_time(sum: u64, k: usize, alpha: Nanos) -> Nanos {
    let t = sum as i128 - (k.saturating_sub(1) as i128) * alpha.0 as i128;
    Nanos(t.clamp(0, u64::MAX as i128) as u64)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GreedyState {
    /// Accumulated all-gather time of the open bucket (member sum).
    pub t_m_ag: Nanos,
    /// Merged reduce-scatter time of the last closed bucket.
    pub t_m_rs: Nanos,
    /// Compute time the open bucket's prefetch overlaps.
    pub t_c: Nanos,
    /// Prefetched compute memory of the open bucket.
    pub m_c: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    /// First parameter: opens the first bucket unconditionally.
    Seed,
    Merge,
    Split,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Seed => "seed",
            Decision::Merge => "merge",
            Decision::Split => "split",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub param: String,
    pub phase: Phase,
    pub time_lhs: Nanos,
    pub time_rhs: Nanos,
    pub mem_lhs: u64,
    pub mem_rhs: u64,
    /// The fused decision; both phases report the same one.
    pub decision: Decision,
}

impl TraceEntry {
    pub fn time_ok(&self) -> bool {
        self.time_lhs <= self.time_rhs
    }

    pub fn mem_ok(&self) -> bool {
        self.mem_lhs <= self.mem_rhs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoPlanReport {
    pub plan: BucketPlan,
    /// Two entries per parameter: forward then backward.
    pub trace: Vec<TraceEntry>,
}

impl AutoPlanReport {
    /// True if some merge was refused, i.e. a constraint shaped the plan.
    pub fn has_binding_constraint(&self) -> bool {
        self.trace.iter().any(|e| e.decision == Decision::Split)
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::from("# param phase decision time_lhs_ns time_rhs_ns mem_lhs mem_rhs\n");
        let bytes = |b: u64| if b == u64::MAX { "inf".to_string() } else { b.to_string() };
        for e in &self.trace {
            writeln!(
                s,
                "{} {} {} {} {} {} {}",
                e.param,
                e.phase.short(),
                e.decision,
                e.time_lhs.0,
                e.time_rhs.0,
                bytes(e.mem_lhs),
                bytes(e.mem_rhs)
            )
            .unwrap();
        }
        s
    }
}

fn ordered_entries<'a>(spec: &ModelSpec, profile: &'a ProfileTable) -> Result<Vec<&'a ProfileEntry>> {
    profile.check_covers(spec)?;
    let entries: Vec<&ProfileEntry> =
        spec.params().map(|(_, p)| profile.get(&p.name).expect("profile covers spec")).collect();
    if entries.is_empty() {
        return Err(Error::Profile("model has no parameters".into()));
    }
    Ok(entries)
}

pub fn auto_plan(spec: &ModelSpec, profile: &ProfileTable, model: &CostModel) -> Result<AutoPlanReport> {
    let entries = ordered_entries(spec, profile)?;
    let alpha = model.link.alpha;
    let limit = model.mem_limit;

    let first = entries[0];
    let mut buckets: Vec<Vec<String>> = vec![vec![first.param.clone()]];
    let mut open: Vec<&ProfileEntry> = vec![first];
    let mut st = GreedyState { t_m_ag: first.t_ag, t_m_rs: Nanos::ZERO, t_c: first.t_c, m_c: first.m_c };
    let mut trace = Vec::with_capacity(2 * entries.len());
    for phase in [Phase::Forward, Phase::Backward] {
        trace.push(TraceEntry {
            param: first.param.clone(),
            phase,
            time_lhs: Nanos::ZERO,
            time_rhs: st.t_c,
            mem_lhs: st.m_c,
            mem_rhs: limit,
            decision: Decision::Seed,
        });
    }

    for &e in &entries[1..] {
        let merged = merged_time(st.t_m_ag.0 + e.t_ag.0, open.len() + 1, alpha);
        let bwd_lhs = st.t_m_rs + merged;
        let mem_lhs = st.m_c.saturating_add(e.m_c);
        let accept = merged <= st.t_c && bwd_lhs <= st.t_c && mem_lhs <= limit;
        let decision = if accept { Decision::Merge } else { Decision::Split };
        for (phase, lhs) in [(Phase::Forward, merged), (Phase::Backward, bwd_lhs)] {
            trace.push(TraceEntry {
                param: e.param.clone(),
                phase,
                time_lhs: lhs,
                time_rhs: st.t_c,
                mem_lhs,
                mem_rhs: limit,
                decision,
            });
        }
        if accept {
            open.push(e);
            buckets.last_mut().unwrap().push(e.param.clone());
            st.t_m_ag += e.t_ag;
            st.m_c = mem_lhs;
        } else {
            st.t_c = open.iter().map(|p| p.t_c).sum();
            st.t_m_rs = merged_time(open.iter().map(|p| p.t_rs.0).sum(), open.len(), alpha);
            open = vec![e];
            buckets.push(vec![e.param.clone()]);
            st.t_m_ag = e.t_ag;
            st.m_c = e.m_c;
        }
    }
    Ok(AutoPlanReport { plan: BucketPlan::new(buckets), trace })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    /// Merging `param` into `bucket` exposes its all-gather in `phase`.
    Time { bucket: usize, param: String, phase: Phase, lhs: Nanos, rhs: Nanos },
    /// Merging `param` into `bucket` exceeds the memory limit.
    Memory { bucket: usize, param: String, lhs: u64, rhs: u64 },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::Time { bucket, param, phase, lhs, rhs } => write!(
                f,
                "bucket {bucket}: merging `{param}` violates the {} time bound ({} > {})",
                phase.short(),
                lhs,
                rhs
            ),
            PlanViolation::Memory { bucket, param, lhs, rhs } => {
                write!(f, "bucket {bucket}: merging `{param}` violates the memory bound ({lhs} > {rhs})")
            }
        }
    }
}

/// Re-evaluates every non-initial merge of `plan` against the greedy rules,
/// from prefix sums over the plan rather than by replaying the greedy loop.
pub fn check_plan(
    plan: &BucketPlan,
    _spec: &ModelSpec,
    profile: &ProfileTable,
    model: &CostModel,
) -> Vec<PlanViolation> {
    let alpha = model.link.alpha;
    let look = |name: &str| profile.get(name);
    let mut violations = Vec::new();
    let mut prev: Option<&Vec<String>> = None;
    for (b, bucket) in plan.buckets().iter().enumerate() {
        let Some(members) = bucket.iter().map(|n| look(n)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let (t_c, t_rs) = match prev.and_then(|p| p.iter().map(|n| look(n)).collect::<Option<Vec<_>>>()) {
            Some(pm) => (
                pm.iter().map(|e| e.t_c).sum::<Nanos>(),
                merged_time(pm.iter().map(|e| e.t_rs.0).sum(), pm.len(), alpha),
            ),
            None => (members[0].t_c, Nanos::ZERO),
        };
        let mut ag_sum = 0u64;
        let mut mem = 0u64;
        for (j, e) in members.iter().enumerate() {
            ag_sum += e.t_ag.0;
            let mem_before = mem;
            mem = mem.saturating_add(e.m_c);
            if j == 0 {
                continue;
            }
            let merged = merged_time(ag_sum, j + 1, alpha);
            for (phase, lhs) in [(Phase::Forward, merged), (Phase::Backward, t_rs + merged)] {
                if lhs > t_c {
                    violations.push(PlanViolation::Time { bucket: b, param: e.param.clone(), phase, lhs, rhs: t_c });
                }
            }
            let mem_lhs = mem_before.saturating_add(e.m_c);
            if mem_lhs > model.mem_limit {
                violations.push(PlanViolation::Memory {
                    bucket: b,
                    param: e.param.clone(),
                    lhs: mem_lhs,
                    rhs: model.mem_limit,
                });
            }
        }
        prev = Some(bucket);
    }
    violations
}
