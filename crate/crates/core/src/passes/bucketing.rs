use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{Collective, Graph, NodeId, NodeKind, Phase};
use crate::units::shard_bytes;

use super::plan::BucketPlan;

/// Component-wise longest common prefix of dotted module paths.
pub(crate) fn common_module_path<'a>(paths: impl IntoIterator<Item = &'a str>, root: &str) -> String {
    let mut iter = paths.into_iter();
    let Some(first) = iter.next() else { return root.to_string() };
    let mut prefix: Vec<&str> = first.split('.').collect();
    for p in iter {
        let n = prefix.iter().zip(p.split('.')).take_while(|(a, b)| *a == b).count();
        prefix.truncate(n);
    }
    if prefix.is_empty() {
        root.to_string()
    } else {
        prefix.join(".")
    }
}

/// Merges the collectives of every multi-parameter bucket into one.
///
/// For each bucket and phase, the member all-gathers and their waits become
/// one all-gather over the concatenated buffer plus one wait; each member
/// keeps its copy-out so consumers are unchanged, and gains a copy-in of its
/// local shard into the bucket's send buffer. In the backward pass the
/// member reduce-scatters and waits merge the same way behind the existing
/// per-member gradient copy-ins. Singleton buckets are left untouched.
pub fn apply_bucketing(graph: &Graph, plan: &BucketPlan) -> Result<Graph> {
    let order: Vec<&str> = graph.params().iter().map(|p| p.name.as_str()).collect();
    plan.check_partition(&order)?;

    let mut out = graph.clone();
    let root = graph.model_name().to_string();
    let mut remap: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut new_edges: Vec<(NodeId, NodeId)> = Vec::new();
    let adj = graph.adjacency();

    for bucket in plan.buckets() {
        let members: BTreeSet<&str> = bucket.iter().map(String::as_str).collect();
        for phase in [Phase::Forward, Phase::Backward] {
            for collective in [Collective::AllGather, Collective::ReduceScatter] {
                let mut units: Vec<NodeId> = Vec::new();
                for node in graph.nodes() {
                    let is_kind = match collective {
                        Collective::AllGather => matches!(node.kind, NodeKind::AllGather { .. }),
                        Collective::ReduceScatter => {
                            matches!(node.kind, NodeKind::ReduceScatter { .. })
                        }
                    };
                    if !is_kind || node.phase != phase {
                        continue;
                    }
                    let inside = node.param_refs.iter().filter(|p| members.contains(p.as_str())).count();
                    if inside == 0 {
                        continue;
                    }
                    if inside != node.param_refs.len() {
                        return Err(Error::Plan(format!(
                            "collective {} spans parameters outside its bucket",
                            node.label()
                        )));
                    }
                    units.push(node.id);
                }
                if units.len() < 2 {
                    continue;
                }
                let param_pos = |id: &NodeId| {
                    let first = &graph.node(*id).param_refs[0];
                    order.iter().position(|p| p == first).unwrap_or(usize::MAX)
                };
                units.sort_by_key(param_pos);

                let waits: Vec<NodeId> = units
                    .iter()
                    .map(|&u| {
                        adj.succs(u)
                            .iter()
                            .copied()
                            .find(|&s| graph.node(s).kind.waits_on() == Some(u))
                            .ok_or_else(|| Error::Plan(format!("collective {} has no wait", graph.node(u).label())))
                    })
                    .collect::<Result<_>>()?;
                let bytes: u64 = units.iter().map(|&u| graph.node(u).kind.bytes()).sum();
                let refs: Vec<String> = units.iter().flat_map(|&u| graph.node(u).param_refs.clone()).collect();
                let path = common_module_path(units.iter().map(|&u| graph.node(u).module_path.as_str()), &root);
                let (kind, make_wait): (NodeKind, fn(NodeId) -> NodeKind) = match collective {
                    Collective::AllGather => (NodeKind::AllGather { bytes }, |of| NodeKind::AllGatherWait { of }),
                    Collective::ReduceScatter => {
                        (NodeKind::ReduceScatter { bytes }, |of| NodeKind::ReduceScatterWait { of })
                    }
                };
                let merged = out.add_node(kind, phase, path.clone(), refs.clone());
                let merged_wait = out.add_node(make_wait(merged), phase, path, refs);
                for (&u, &w) in units.iter().zip(&waits) {
                    remap.insert(u, merged);
                    remap.insert(w, merged_wait);
                    if collective == Collective::AllGather {
                        let staged = adj.preds(u).iter().any(|&p| {
                            matches!(graph.node(p).kind, NodeKind::CopyIn { into: Collective::AllGather, .. })
                        });
                        if !staged {
                            let src = graph.node(u);
                            let p = graph.param(&src.param_refs[0]).expect("known parameter");
                            let ci = out.add_node(
                                NodeKind::CopyIn {
                                    bytes: shard_bytes(p.numel, graph.world_size(), p.elem_bytes),
                                    into: Collective::AllGather,
                                },
                                phase,
                                src.module_path.clone(),
                                src.param_refs.clone(),
                            );
                            new_edges.push((ci, merged));
                        }
                    }
                }
            }
        }
    }

    if remap.is_empty() {
        return Ok(out);
    }
    let map = |id: NodeId| remap.get(&id).copied().unwrap_or(id);
    let mut edges: BTreeSet<(NodeId, NodeId)> =
        out.edges().map(|(a, b)| (map(a), map(b))).filter(|(a, b)| a != b).collect();
    edges.extend(new_edges);
    for &old in remap.keys() {
        out.remove_node(old);
    }
    out.replace_edges(edges);
    out.assign_buffer_releases();
    Ok(out)
}
