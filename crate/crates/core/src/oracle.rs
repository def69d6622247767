//! Brute-force references: exhaustive plan search on tiny models and an
//! independent re-timing of simulator output.

use std::collections::BTreeMap;
use std::fmt;

use crate::auto_wrap::auto_plan;
use crate::cost::{CostModel, ProfileTable};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Stream};
use crate::model::{build_fsdp_graph, ModelSpec};
use crate::passes::{BucketPlan, ReorderPolicy, Schedule};
use crate::pipeline::run_on_graph;
use crate::sim::SimReport;
use crate::units::Nanos;

pub const MAX_SEARCH_PARAMS: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SearchBudget {
    pub max_params: usize,
    /// Cap on simulated (plan, policy) variants.
    pub max_orderings: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget { max_params: MAX_SEARCH_PARAMS, max_orderings: 4 << (MAX_SEARCH_PARAMS - 1) }
    }
}

impl SearchBudget {
    fn check(&self, n: usize) -> Result<u64> {
        if self.max_params == 0 || self.max_params > MAX_SEARCH_PARAMS || self.max_orderings == 0 {
            return Err(Error::Budget(format!(
                "max_params must be in 1..={MAX_SEARCH_PARAMS} and max_orderings positive"
            )));
        }
        if n == 0 {
            return Err(Error::Budget("model has no parameters".into()));
        }
        if n > self.max_params {
            return Err(Error::Budget(format!("{n} parameters exceed the budget of {}", self.max_params)));
        }
        let variants = (1u64 << (n - 1)) * 4;
        if variants > self.max_orderings {
            return Err(Error::Budget(format!("{variants} variants exceed the budget of {}", self.max_orderings)));
        }
        Ok(variants)
    }
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub plan: BucketPlan,
    pub policy: ReorderPolicy,
    pub report: SimReport,
    /// Number of (plan, policy) variants simulated.
    pub evaluated: u64,
}

/// All contiguous partitions of `names`, one per bit mask of cut points.
pub fn contiguous_partitions(names: &[String]) -> Vec<BucketPlan> {
    let n = names.len();
    if n == 0 {
        return Vec::new();
    }
    (0..1u64 << (n - 1))
        .map(|mask| {
            let mut buckets = vec![vec![names[0].clone()]];
            for (i, name) in names.iter().enumerate().skip(1) {
                if mask >> (i - 1) & 1 == 1 {
                    buckets.push(Vec::new());
                }
                buckets.last_mut().unwrap().push(name.clone());
            }
            BucketPlan::new(buckets)
        })
        .collect()
}

/// Minimum simulated total time over every contiguous plan and every
/// reorder policy; ties go to lower peak memory, then the smaller plan.
pub fn best_plan_exhaustive(
    spec: &ModelSpec,
    profile: &ProfileTable,
    model: &CostModel,
    budget: SearchBudget,
) -> Result<OracleResult> {
    profile.check_covers(spec)?;
    let names: Vec<String> = spec.params().map(|(_, p)| p.name.clone()).collect();
    budget.check(names.len())?;
    let base = build_fsdp_graph(spec)?;
    let mut best: Option<OracleResult> = None;
    let mut evaluated = 0;
    for plan in contiguous_partitions(&names) {
        for policy in ReorderPolicy::all() {
            let report = run_on_graph(&base, spec, model, Some(&plan), Some(policy))?.report;
            evaluated += 1;
            let better = match &best {
                None => true,
                Some(b) => {
                    (report.total_time, report.peak_memory, &plan)
                        < (b.report.total_time, b.report.peak_memory, &b.plan)
                }
            };
            if better {
                best = Some(OracleResult { plan: plan.clone(), policy, report, evaluated: 0 });
            }
        }
    }
    let mut best = best.expect("at least one plan");
    best.evaluated = evaluated;
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct GreedyGap {
    pub oracle: OracleResult,
    pub greedy_plan: BucketPlan,
    pub greedy: SimReport,
    pub vanilla: SimReport,
    pub greedy_binding: bool,
}

impl GreedyGap {
    pub fn gap(&self) -> Nanos {
        self.greedy.total_time.saturating_sub(self.oracle.report.total_time)
    }
}

/// The oracle optimum next to the greedy plan under the default policy and
/// the unbucketed, unprefetched baseline.
pub fn greedy_gap(
    spec: &ModelSpec,
    profile: &ProfileTable,
    model: &CostModel,
    budget: SearchBudget,
) -> Result<GreedyGap> {
    let oracle = best_plan_exhaustive(spec, profile, model, budget)?;
    let auto = auto_plan(spec, profile, model)?;
    let base = build_fsdp_graph(spec)?;
    let greedy = run_on_graph(&base, spec, model, Some(&auto.plan), Some(ReorderPolicy::default()))?.report;
    let vanilla = run_on_graph(&base, spec, model, None, None)?.report;
    Ok(GreedyGap { oracle, greedy_binding: auto.has_binding_constraint(), greedy_plan: auto.plan, greedy, vanilla })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    /// Index into the report's event list, or the event count if the report
    /// is missing events.
    pub index: usize,
    pub node: NodeId,
    pub expected: (Nanos, Nanos),
    pub reported: Option<(Nanos, Nanos)>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event {} ({}): expected [{}, {}]", self.index, self.node, self.expected.0, self.expected.1)?;
        match self.reported {
            Some((s, e)) => write!(f, ", reported [{s}, {e}]"),
            None => write!(f, ", not reported"),
        }
    }
}

/// Recomputes every start and end by stepping a clock through completion
/// instants and, at each instant, starting whatever the stream heads allow.
/// Returns the first event (in report order) whose times differ.
pub fn retime_events(
    report: &SimReport,
    schedule: &Schedule,
    graph: &Graph,
    model: &CostModel,
) -> std::result::Result<(), Divergence> {
    let order = schedule.order();
    let adj = graph.adjacency();
    let n = order.len();
    let dur: Vec<Nanos> = order
        .iter()
        .map(|&id| graph.get(id).and_then(|node| model.node_duration(node).ok()).unwrap_or(Nanos::ZERO))
        .collect();
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let stream_of = |i: usize| graph.get(order[i]).map_or(Stream::Compute, |node| node.stream);
    let lane = |s: Stream| (0..n).filter(|&i| stream_of(i) == s).collect::<Vec<_>>();
    let (compute, comm) = (lane(Stream::Compute), lane(Stream::Communication));

    let mut start: Vec<Option<Nanos>> = vec![None; n];
    let mut end: Vec<Option<Nanos>> = vec![None; n];
    let (mut ci, mut mi) = (0usize, 0usize);
    let mut compute_reached = Nanos::ZERO;
    let mut t = Nanos::ZERO;
    let done_by = |end: &[Option<Nanos>], i: usize, t: Nanos| end[i].is_some_and(|e| e <= t);

    loop {
        let mut progressed = true;
        while progressed {
            progressed = false;
            if let Some(&i) = compute.get(ci) {
                let deps_done = adj.preds(order[i]).iter().all(|d| pos.get(d).is_some_and(|&j| done_by(&end, j, t)));
                let is_wait = graph.get(order[i]).is_some_and(|node| node.kind.is_wait());
                if is_wait && start[i].is_none() {
                    start[i] = Some(compute_reached);
                }
                if deps_done && compute_reached <= t {
                    if !is_wait {
                        start[i] = Some(t);
                    }
                    end[i] = Some(t + if is_wait { Nanos::ZERO } else { dur[i] });
                    compute_reached = end[i].unwrap();
                    ci += 1;
                    progressed = true;
                }
            }
            if let Some(&i) = comm.get(mi) {
                let comm_free = mi == 0 || done_by(&end, comm[mi - 1], t);
                let deps_done = adj.preds(order[i]).iter().all(|d| pos.get(d).is_some_and(|&j| done_by(&end, j, t)));
                let issued = compute.iter().take_while(|&&c| c < i).all(|&c| done_by(&end, c, t));
                if comm_free && deps_done && issued {
                    start[i] = Some(t);
                    end[i] = Some(t + dur[i]);
                    mi += 1;
                    progressed = true;
                }
            }
        }
        if ci == compute.len() && mi == comm.len() {
            break;
        }
        match end.iter().flatten().filter(|&&e| e > t).min() {
            Some(&next) => t = next,
            None => break,
        }
    }

    for (index, ev) in report.events.iter().enumerate() {
        let Some(&i) = pos.get(&ev.node) else { continue };
        let expected = (start[i].unwrap_or(Nanos::MAX), end[i].unwrap_or(Nanos::MAX));
        if (ev.start, ev.end) != expected {
            return Err(Divergence { index, node: ev.node, expected, reported: Some((ev.start, ev.end)) });
        }
    }
    if report.events.len() != n {
        let missing = (0..n).find(|&i| !report.events.iter().any(|e| e.node == order[i])).unwrap_or(0);
        return Err(Divergence {
            index: report.events.len(),
            node: order[missing],
            expected: (start[missing].unwrap_or(Nanos::MAX), end[missing].unwrap_or(Nanos::MAX)),
            reported: None,
        });
    }
    Ok(())
}
