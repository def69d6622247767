use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeKind, Phase, Stream};

/// Program (issue) order over every node of a graph.
///
/// The compute stream executes its nodes in this order; the communication
/// stream is a FIFO of the collectives in this order, and a collective is
/// issued only once every compute-stream node before it has finished.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    order: Vec<NodeId>,
}

impl Schedule {
    pub fn new(order: Vec<NodeId>) -> Self {
        Schedule { order }
    }

    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.order.iter().position(|&n| n == id)
    }

    fn stream(&self, graph: &Graph, stream: Stream) -> Vec<NodeId> {
        self.order.iter().copied().filter(|&n| graph.node(n).stream == stream).collect()
    }

    pub fn compute_stream(&self, graph: &Graph) -> Vec<NodeId> {
        self.stream(graph, Stream::Compute)
    }

    pub fn comm_stream(&self, graph: &Graph) -> Vec<NodeId> {
        self.stream(graph, Stream::Communication)
    }

    /// Every graph node appears exactly once.
    pub fn check_covers(&self, graph: &Graph) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &n in &self.order {
            if graph.get(n).is_none() {
                return Err(Error::Schedule(format!("node {n} is not in the graph")));
            }
            if !seen.insert(n) {
                return Err(Error::Schedule(format!("node {n} is scheduled twice")));
            }
        }
        if seen.len() != graph.len() {
            let missing = graph.node_ids().find(|n| !seen.contains(n)).expect("some node missing");
            return Err(Error::Schedule(format!("node {missing} is not scheduled")));
        }
        Ok(())
    }

    /// First edge `(from, to)` with `to` scheduled before `from`.
    pub fn first_violated_edge(&self, graph: &Graph) -> Option<(NodeId, NodeId)> {
        let pos: BTreeMap<NodeId, usize> = self.order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        graph.edges().find(|(a, b)| match (pos.get(a), pos.get(b)) {
            (Some(pa), Some(pb)) => pa > pb,
            _ => true,
        })
    }

    pub fn is_linear_extension(&self, graph: &Graph) -> bool {
        self.check_covers(graph).is_ok() && self.first_violated_edge(graph).is_none()
    }
}

/// Where bucket k+1's all-gather is issued relative to bucket k's wait.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Placement {
    /// Immediately before the wait, so the gather also overlaps the
    /// copy-outs that follow the wait.
    BeforeLastWait,
    /// After the wait and its copy-outs.
    AfterLastWait,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::BeforeLastWait, Placement::AfterLastWait];
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::BeforeLastWait => "before",
            Placement::AfterLastWait => "after",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Placement::BeforeLastWait),
            "after" => Ok(Placement::AfterLastWait),
            other => Err(Error::invalid("placement", format!("`{other}` is not before|after"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReorderPolicy {
    pub fwd_ag_placement: Placement,
    pub bwd_ag_placement: Placement,
}

impl Default for ReorderPolicy {
    fn default() -> Self {
        ReorderPolicy { fwd_ag_placement: Placement::BeforeLastWait, bwd_ag_placement: Placement::AfterLastWait }
    }
}

impl ReorderPolicy {
    pub fn all() -> impl Iterator<Item = ReorderPolicy> {
        Placement::ALL.into_iter().flat_map(|f| {
            Placement::ALL.into_iter().map(move |b| ReorderPolicy { fwd_ag_placement: f, bwd_ag_placement: b })
        })
    }
}

impl fmt::Display for ReorderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fwd={},bwd={}", self.fwd_ag_placement, self.bwd_ag_placement)
    }
}

/// Nodes of one bucketed all-gather in issue order.
#[derive(Debug)]
struct GatherUnit {
    copy_ins: Vec<NodeId>,
    gather: NodeId,
    wait: NodeId,
    copy_outs: Vec<NodeId>,
}

#[derive(Debug)]
struct ReduceUnit {
    copy_ins: Vec<NodeId>,
    reduce: NodeId,
    wait: NodeId,
}

/// One phase split into buckets in execution order. `computes[k]` and
/// `reduces[k]` run once bucket k has been gathered.
#[derive(Debug, Default)]
struct PhaseLayout {
    gathers: Vec<GatherUnit>,
    computes: Vec<Vec<NodeId>>,
    reduces: Vec<Vec<ReduceUnit>>,
}

fn layout(graph: &Graph, phase: Phase) -> Result<PhaseLayout> {
    let adj = graph.adjacency();
    let param_index: BTreeMap<&str, usize> =
        graph.params().iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
    let first_param = |id: NodeId| -> usize {
        graph.node(id).param_refs.first().and_then(|p| param_index.get(p.as_str()).copied()).unwrap_or(0)
    };
    let in_phase = |kind: fn(&NodeKind) -> bool| -> Vec<NodeId> {
        graph.nodes().filter(|n| n.phase == phase && kind(&n.kind)).map(|n| n.id).collect()
    };
    let wait_of = |c: NodeId| -> Result<NodeId> {
        adj.succs(c)
            .iter()
            .copied()
            .find(|&s| graph.node(s).kind.waits_on() == Some(c))
            .ok_or_else(|| Error::Schedule(format!("collective {} has no wait", graph.node(c).label())))
    };
    let copy_ins_of = |c: NodeId| -> Vec<NodeId> {
        let mut v: Vec<NodeId> =
            adj.preds(c).iter().copied().filter(|&p| matches!(graph.node(p).kind, NodeKind::CopyIn { .. })).collect();
        v.sort_by_key(|&n| (first_param(n), n));
        v
    };
    // forward runs buckets in parameter order, backward in reverse
    let exec_key = |id: NodeId| -> i64 {
        let i = first_param(id) as i64;
        if phase == Phase::Forward {
            i
        } else {
            -i
        }
    };

    let mut gathers = in_phase(|k| matches!(k, NodeKind::AllGather { .. }));
    gathers.sort_by_key(|&g| (exec_key(g), g));
    let mut layout = PhaseLayout::default();
    let mut bucket_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, &g) in gathers.iter().enumerate() {
        let wait = wait_of(g)?;
        let mut copy_outs: Vec<NodeId> = adj
            .succs(wait)
            .iter()
            .copied()
            .filter(|&c| matches!(graph.node(c).kind, NodeKind::CopyOut { .. }))
            .collect();
        copy_outs.sort_by_key(|&n| (first_param(n), n));
        for p in &graph.node(g).param_refs {
            bucket_of.insert(p.as_str(), k);
        }
        layout.gathers.push(GatherUnit { copy_ins: copy_ins_of(g), gather: g, wait, copy_outs });
    }
    let segments = layout.gathers.len().max(1);
    layout.computes = vec![Vec::new(); segments];
    layout.reduces = (0..segments).map(|_| Vec::new()).collect();

    // node ids of compute nodes follow execution order within a phase
    let computes = in_phase(|k| matches!(k, NodeKind::Compute { .. }));
    let mut segment = 0;
    let mut segment_of_param: BTreeMap<&str, usize> = BTreeMap::new();
    for c in computes {
        let node = graph.node(c);
        for p in &node.param_refs {
            if let Some(&k) = bucket_of.get(p.as_str()) {
                segment = segment.max(k);
            }
        }
        for p in &node.param_refs {
            segment_of_param.insert(p.as_str(), segment);
        }
        layout.computes[segment].push(c);
    }

    let mut reduces = in_phase(|k| matches!(k, NodeKind::ReduceScatter { .. }));
    reduces.sort_by_key(|&r| (exec_key(r), r));
    for r in reduces {
        let seg = graph
            .node(r)
            .param_refs
            .iter()
            .filter_map(|p| segment_of_param.get(p.as_str()).copied())
            .max()
            .unwrap_or(segments - 1);
        layout.reduces[seg].push(ReduceUnit { copy_ins: copy_ins_of(r), reduce: r, wait: wait_of(r)? });
    }
    Ok(layout)
}

fn emit_phase(layout: &PhaseLayout, placement: Option<Placement>, out: &mut Vec<NodeId>) {
    let issue = |k: usize, out: &mut Vec<NodeId>| {
        let g = &layout.gathers[k];
        out.extend(&g.copy_ins);
        out.push(g.gather);
    };
    let mut pending_reduce_wait: Option<NodeId> = None;
    if placement.is_some() && !layout.gathers.is_empty() {
        issue(0, out);
    }
    for k in 0..layout.computes.len() {
        if let Some(g) = layout.gathers.get(k) {
            let prefetch = k + 1 < layout.gathers.len();
            match placement {
                None => {
                    issue(k, out);
                    out.push(g.wait);
                    out.extend(&g.copy_outs);
                }
                Some(Placement::BeforeLastWait) => {
                    if prefetch {
                        issue(k + 1, out);
                    }
                    out.push(g.wait);
                    out.extend(&g.copy_outs);
                }
                Some(Placement::AfterLastWait) => {
                    out.push(g.wait);
                    out.extend(&g.copy_outs);
                    if prefetch {
                        issue(k + 1, out);
                    }
                }
            }
        }
        out.extend(&layout.computes[k]);
        for r in &layout.reduces[k] {
            match placement {
                None => {
                    out.extend(&r.copy_ins);
                    out.push(r.reduce);
                    out.push(r.wait);
                }
                Some(_) => {
                    // the previous bucket's wait moves down to just before this reduce
                    out.extend(pending_reduce_wait.take());
                    out.extend(&r.copy_ins);
                    out.push(r.reduce);
                    pending_reduce_wait = Some(r.wait);
                }
            }
        }
    }
    out.extend(pending_reduce_wait);
}

fn build(graph: &Graph, policy: Option<ReorderPolicy>) -> Result<Schedule> {
    let mut order = Vec::with_capacity(graph.len());
    let fwd = layout(graph, Phase::Forward)?;
    emit_phase(&fwd, policy.map(|p| p.fwd_ag_placement), &mut order);
    let bwd = layout(graph, Phase::Backward)?;
    emit_phase(&bwd, policy.map(|p| p.bwd_ag_placement), &mut order);
    let schedule = Schedule::new(order);
    schedule.check_covers(graph)?;
    if let Some((a, b)) = schedule.first_violated_edge(graph) {
        return Err(Error::Schedule(format!(
            "placement puts {} before its dependency {}",
            graph.node(b).label(),
            graph.node(a).label()
        )));
    }
    Ok(schedule)
}

/// Each collective issued immediately before its own wait; nothing is
/// prefetched, so every collective is fully exposed.
pub fn vanilla_schedule(graph: &Graph) -> Result<Schedule> {
    build(graph, None)
}

/// Prefetches one bucket ahead in each phase and delays each reduce-scatter
/// wait until just before the next reduce-scatter is issued.
pub fn reorder(graph: &Graph, policy: ReorderPolicy) -> Result<Schedule> {
    build(graph, Some(policy))
}

/// Pushes bucket `k + 1`'s forward all-gather (with its staging copies) to
/// immediately before bucket `k`'s wait, leaving everything else in place.
pub fn hoist_forward_gather(graph: &Graph, schedule: &Schedule, k: usize) -> Result<Schedule> {
    let fwd = layout(graph, Phase::Forward)?;
    if k + 1 >= fwd.gathers.len() {
        return Err(Error::Schedule(format!("no forward bucket after bucket {k}")));
    }
    let next = &fwd.gathers[k + 1];
    let moved: BTreeSet<NodeId> = next.copy_ins.iter().copied().chain([next.gather]).collect();
    let mut order: Vec<NodeId> = schedule.order().iter().copied().filter(|n| !moved.contains(n)).collect();
    let at = order
        .iter()
        .position(|&n| n == fwd.gathers[k].wait)
        .ok_or_else(|| Error::Schedule("wait not scheduled".into()))?;
    let mut block: Vec<NodeId> = next.copy_ins.clone();
    block.push(next.gather);
    order.splice(at..at, block);
    Ok(Schedule::new(order))
}

/// Wait node of the `k`-th forward bucket in execution order.
pub fn forward_gather_wait(graph: &Graph, k: usize) -> Result<NodeId> {
    layout(graph, Phase::Forward)?
        .gathers
        .get(k)
        .map(|g| g.wait)
        .ok_or_else(|| Error::Schedule(format!("no forward bucket {k}")))
}
