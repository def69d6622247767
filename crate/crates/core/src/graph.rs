//! Computation/communication DAG shared by every stage of the pipeline.
//!
//! A [`Graph`] holds compute, copy, collective and wait nodes for one
//! forward+backward step. Edges are plain dependencies; byte sizes live on the
//! nodes. Graphs are built once and never mutated by consumers: passes clone
//! and rewrite into a fresh graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub fn short(self) -> &'static str {
        match self {
            Phase::Forward => "fwd",
            Phase::Backward => "bwd",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    Compute,
    Communication,
}

impl Stream {
    /// Chrome-trace thread id.
    pub fn tid(self) -> u32 {
        match self {
            Stream::Compute => 0,
            Stream::Communication => 1,
        }
    }
}

/// Which collective a copy-in stages data for.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Collective {
    AllGather,
    ReduceScatter,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Compute {
        cost_key: String,
    },
    AllGather {
        bytes: u64,
    },
    AllGatherWait {
        of: NodeId,
    },
    ReduceScatter {
        bytes: u64,
    },
    ReduceScatterWait {
        of: NodeId,
    },
    /// Copy into a concatenated communication buffer. For all-gathers this is
    /// the local shard flattened into a bucket's send buffer; for
    /// reduce-scatters it is the full gradient chunked per rank.
    CopyIn {
        bytes: u64,
        into: Collective,
    },
    CopyOut {
        bytes: u64,
    },
}

impl NodeKind {
    pub fn bytes(&self) -> u64 {
        match *self {
            NodeKind::AllGather { bytes }
            | NodeKind::ReduceScatter { bytes }
            | NodeKind::CopyIn { bytes, .. }
            | NodeKind::CopyOut { bytes } => bytes,
            _ => 0,
        }
    }

    pub fn stream(&self) -> Stream {
        match self {
            NodeKind::AllGather { .. } | NodeKind::ReduceScatter { .. } => Stream::Communication,
            _ => Stream::Compute,
        }
    }

    pub fn is_collective(&self) -> bool {
        self.stream() == Stream::Communication
    }

    pub fn is_wait(&self) -> bool {
        matches!(self, NodeKind::AllGatherWait { .. } | NodeKind::ReduceScatterWait { .. })
    }

    pub fn waits_on(&self) -> Option<NodeId> {
        match *self {
            NodeKind::AllGatherWait { of } | NodeKind::ReduceScatterWait { of } => Some(of),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Compute { .. } => "C",
            NodeKind::AllGather { .. } => "AG",
            NodeKind::AllGatherWait { .. } => "WAG",
            NodeKind::ReduceScatter { .. } => "RS",
            NodeKind::ReduceScatterWait { .. } => "WRS",
            NodeKind::CopyIn { into: Collective::AllGather, .. } => "CIAG",
            NodeKind::CopyIn { into: Collective::ReduceScatter, .. } => "CIRS",
            NodeKind::CopyOut { .. } => "CO",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub phase: Phase,
    pub module_path: String,
    pub param_refs: Vec<String>,
    pub stream: Stream,
    /// Gathered-parameter bytes freed when this node ends. Attached to the
    /// last compute that consumes a gathered buffer.
    pub release_bytes: u64,
}

impl Node {
    /// Whitespace-free label used in reports and traces.
    pub fn label(&self) -> String {
        format!("{}.{}{}@{}", self.phase.short(), self.kind.tag(), self.id, self.module_path)
    }
}

/// Per-parameter facts the passes need after lowering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub module: String,
    pub numel: u64,
    pub elem_bytes: u64,
    pub grad_elem_bytes: u64,
}

impl ParamInfo {
    pub fn full_bytes(&self) -> u64 {
        self.numel * self.elem_bytes
    }

    pub fn grad_bytes(&self) -> u64 {
        self.numel * self.grad_elem_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    model_name: String,
    world_size: u32,
    /// Parameters in forward execution order.
    params: Vec<ParamInfo>,
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeSet<(NodeId, NodeId)>,
    next_id: u32,
}

/// Predecessor/successor lists, built once per query batch.
#[derive(Debug, Default)]
pub struct Adjacency {
    preds: BTreeMap<NodeId, Vec<NodeId>>,
    succs: BTreeMap<NodeId, Vec<NodeId>>,
}

impl Adjacency {
    pub fn preds(&self, id: NodeId) -> &[NodeId] {
        self.preds.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn succs(&self, id: NodeId) -> &[NodeId] {
        self.succs.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Graph {
    pub fn new(model_name: impl Into<String>, world_size: u32, params: Vec<ParamInfo>) -> Self {
        Graph {
            model_name: model_name.into(),
            world_size,
            params,
            nodes: BTreeMap::new(),
            edges: BTreeSet::new(),
            next_id: 0,
        }
    }

    /// Assembles a graph from raw parts without checking anything. Used to
    /// build malformed graphs for [`Graph::validate`].
    pub fn from_parts(
        nodes: impl IntoIterator<Item = Node>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Self {
        let nodes: BTreeMap<_, _> = nodes.into_iter().map(|n| (n.id, n)).collect();
        let next_id = nodes.keys().next_back().map_or(0, |id| id.0 + 1);
        Graph {
            model_name: "graph".into(),
            world_size: 1,
            params: Vec::new(),
            nodes,
            edges: edges.into_iter().collect(),
            next_id,
        }
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamInfo> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn add_node(
        &mut self,
        kind: NodeKind,
        phase: Phase,
        module_path: impl Into<String>,
        param_refs: Vec<String>,
    ) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let stream = kind.stream();
        self.nodes.insert(
            id,
            Node { id, kind, phase, module_path: module_path.into(), param_refs, stream, release_bytes: 0 },
        );
        id
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.insert((from, to));
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) -> Option<Node> {
        self.edges.retain(|&(a, b)| a != id && b != id);
        self.nodes.remove(&id)
    }

    pub(crate) fn replace_edges(&mut self, edges: BTreeSet<(NodeId, NodeId)>) {
        self.edges = edges;
    }

    pub fn adjacency(&self) -> Adjacency {
        let mut adj = Adjacency::default();
        for &(a, b) in &self.edges {
            adj.succs.entry(a).or_default().push(b);
            adj.preds.entry(b).or_default().push(a);
        }
        adj
    }

    /// Recomputes which compute node frees each gathered buffer: the last
    /// compute (highest id, which is execution order within a phase) reached
    /// through the gather's wait and copy-outs.
    pub(crate) fn assign_buffer_releases(&mut self) {
        for node in self.nodes.values_mut() {
            node.release_bytes = 0;
        }
        let adj = self.adjacency();
        let mut releases: BTreeMap<NodeId, u64> = BTreeMap::new();
        for node in self.nodes.values() {
            let NodeKind::AllGather { bytes } = node.kind else { continue };
            let wait = adj.succs(node.id).iter().copied().find(|&s| self.nodes[&s].kind.waits_on() == Some(node.id));
            let Some(wait) = wait else { continue };
            let last_consumer = adj
                .succs(wait)
                .iter()
                .filter(|&&c| matches!(self.nodes[&c].kind, NodeKind::CopyOut { .. }))
                .flat_map(|&c| adj.succs(c).iter().copied())
                .filter(|&c| {
                    let n = &self.nodes[&c];
                    matches!(n.kind, NodeKind::Compute { .. }) && n.phase == node.phase
                })
                .max()
                .unwrap_or(wait);
            *releases.entry(last_consumer).or_default() += bytes;
        }
        for (id, bytes) in releases {
            self.nodes.get_mut(&id).expect("node exists").release_bytes += bytes;
        }
    }

    /// Every invariant violation, one description each. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (&key, node) in &self.nodes {
            if key != node.id {
                out.push(format!("node stored under {key} carries id {}", node.id));
            }
            if node.module_path.is_empty() {
                out.push(format!("node {} has an empty module path", node.id));
            }
            if node.stream != node.kind.stream() {
                out.push(format!(
                    "node {} ({}) is on the {:?} stream, expected {:?}",
                    node.id,
                    node.kind.tag(),
                    node.stream,
                    node.kind.stream()
                ));
            }
            if let Some(of) = node.kind.waits_on() {
                let expected_ok = matches!(
                    (&node.kind, self.nodes.get(&of).map(|n| &n.kind)),
                    (NodeKind::AllGatherWait { .. }, Some(NodeKind::AllGather { .. }))
                        | (NodeKind::ReduceScatterWait { .. }, Some(NodeKind::ReduceScatter { .. }))
                );
                if !expected_ok {
                    out.push(format!("wait {} references {of}, which is not a matching collective", node.id));
                } else if !self.edges.contains(&(of, node.id)) {
                    out.push(format!("wait {} has no edge from its collective {of}", node.id));
                }
            }
        }
        for &(a, b) in &self.edges {
            if !self.nodes.contains_key(&a) || !self.nodes.contains_key(&b) {
                out.push(format!("edge {a} -> {b} references a missing node"));
            }
        }
        if let Some(stuck) = self.cycle_members() {
            let ids: Vec<String> = stuck.iter().map(ToString::to_string).collect();
            out.push(format!("graph is cyclic; nodes on or behind a cycle: {}", ids.join(", ")));
        }
        out
    }

    /// Kahn's algorithm over edges whose endpoints exist. Returns the nodes
    /// left unsorted when a cycle is present.
    fn cycle_members(&self) -> Option<Vec<NodeId>> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&k| (k, 0)).collect();
        let mut succs: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(a, b) in &self.edges {
            if self.nodes.contains_key(&a) && self.nodes.contains_key(&b) {
                *indeg.get_mut(&b).unwrap() += 1;
                succs.entry(a).or_default().push(b);
            }
        }
        let mut queue: VecDeque<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
        let mut seen = 0;
        while let Some(n) = queue.pop_front() {
            seen += 1;
            for &s in succs.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(s);
                }
            }
        }
        if seen == self.nodes.len() {
            None
        } else {
            Some(indeg.into_iter().filter(|&(_, d)| d > 0).map(|(k, _)| k).collect())
        }
    }

    /// Number of distinct topological orders, counting stops at `cap`.
    pub fn topological_orders_count(&self, cap: u64) -> u64 {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut indeg = vec![0usize; ids.len()];
        let mut succs = vec![Vec::new(); ids.len()];
        for &(a, b) in &self.edges {
            if let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) {
                indeg[ib] += 1;
                succs[ia].push(ib);
            }
        }
        let mut placed = vec![false; ids.len()];
        let mut count = 0;
        count_extensions(&mut indeg, &succs, &mut placed, ids.len(), cap, &mut count);
        count
    }

    /// One record per node in id order. See `docs/formats.md`.
    pub fn to_text(&self) -> String {
        let adj = self.adjacency();
        let mut s = String::new();
        writeln!(
            s,
            "graph {} world_size={} nodes={} edges={}",
            self.model_name,
            self.world_size,
            self.nodes.len(),
            self.edges.len()
        )
        .unwrap();
        for p in &self.params {
            writeln!(
                s,
                "param {} module={} numel={} elem_bytes={} grad_elem_bytes={}",
                p.name, p.module, p.numel, p.elem_bytes, p.grad_elem_bytes
            )
            .unwrap();
        }
        for node in self.nodes.values() {
            write!(
                s,
                "node {} {} phase={} stream={} bytes={} module={} params={}",
                node.id.0,
                node.kind.tag(),
                node.phase.short(),
                match node.stream {
                    Stream::Compute => "compute",
                    Stream::Communication => "comm",
                },
                node.kind.bytes(),
                node.module_path,
                join_or_dash(node.param_refs.iter().map(String::as_str)),
            )
            .unwrap();
            match &node.kind {
                NodeKind::Compute { cost_key } => write!(s, " key={cost_key}").unwrap(),
                NodeKind::AllGatherWait { of } | NodeKind::ReduceScatterWait { of } => {
                    write!(s, " of={}", of.0).unwrap()
                }
                _ => {}
            }
            if node.release_bytes > 0 {
                write!(s, " release={}", node.release_bytes).unwrap();
            }
            let deps: Vec<String> = adj.preds(node.id).iter().map(|d| d.0.to_string()).collect();
            writeln!(s, " deps={}", join_or_dash(deps.iter().map(String::as_str))).unwrap();
        }
        s
    }
}

fn join_or_dash<'a>(items: impl Iterator<Item = &'a str>) -> String {
    let joined: Vec<&str> = items.collect();
    if joined.is_empty() {
        "-".into()
    } else {
        joined.join(",")
    }
}

fn count_extensions(
    indeg: &mut [usize],
    succs: &[Vec<usize>],
    placed: &mut [bool],
    remaining: usize,
    cap: u64,
    count: &mut u64,
) {
    if *count >= cap {
        return;
    }
    if remaining == 0 {
        *count += 1;
        return;
    }
    for i in 0..indeg.len() {
        if placed[i] || indeg[i] != 0 {
            continue;
        }
        placed[i] = true;
        for &s in &succs[i] {
            indeg[s] -= 1;
        }
        count_extensions(indeg, succs, placed, remaining - 1, cap, count);
        for &s in &succs[i] {
            indeg[s] += 1;
        }
        placed[i] = false;
        if *count >= cap {
            return;
        }
    }
}
