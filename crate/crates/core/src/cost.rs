//! Durations and memory deltas for graph nodes.
//!
//! Collectives follow the latency/bandwidth model `alpha + beta * bytes`,
//! copies are bandwidth-only, and compute nodes look their time up by cost
//! key. Files carry seconds and bytes; everything internal is integer
//! nanoseconds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Collective, Graph, Node, NodeId, NodeKind, Phase};
use crate::model::ModelSpec;
use crate::units::{shard_bytes, Nanos};

const FS_PER_NS: u128 = 1_000_000;

/// Base latency plus per-byte transmit cost of one collective.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct LinkParams {
    pub alpha: Nanos,
    /// Inverse bandwidth in femtoseconds per byte.
    pub beta_fs_per_byte: u64,
}

impl LinkParams {
    pub fn from_secs(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("{alpha} is not a finite value >= 0")));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid("beta", format!("{beta} is not a finite value >= 0")));
        }
        Ok(LinkParams { alpha: Nanos::from_secs_f64(alpha), beta_fs_per_byte: (beta * 1e15).round() as u64 })
    }

    pub fn transmit_time(&self, bytes: u64) -> Nanos {
        let fs = self.beta_fs_per_byte as u128 * bytes as u128;
        Nanos(((fs + FS_PER_NS / 2) / FS_PER_NS) as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub link: LinkParams,
    /// Bytes per second for copy-in/copy-out. `u64::MAX` makes copies free.
    pub copy_bandwidth: u64,
    pub compute_times: BTreeMap<String, Nanos>,
    pub compute_peak_mem: BTreeMap<String, u64>,
    /// Memory limit for auto-wrapping. `u64::MAX` means unlimited.
    pub mem_limit: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    alpha: f64,
    beta: f64,
    copy_bandwidth: f64,
    mem_limit: f64,
    #[serde(default)]
    compute_times: BTreeMap<String, f64>,
    #[serde(default)]
    compute_peak_mem: BTreeMap<String, f64>,
}

fn bytes_from_f64(field: &str, value: f64) -> Result<u64> {
    if value.is_nan() || value < 0.0 {
        return Err(Error::invalid(field, format!("{value} is negative or NaN")));
    }
    Ok(if value >= u64::MAX as f64 { u64::MAX } else { value.round() as u64 })
}

impl CostModel {
    pub fn new(link: LinkParams, copy_bandwidth: u64) -> Self {
        CostModel {
            link,
            copy_bandwidth,
            compute_times: BTreeMap::new(),
            compute_peak_mem: BTreeMap::new(),
            mem_limit: u64::MAX,
        }
    }

    pub fn with_compute(mut self, key: impl Into<String>, time: Nanos) -> Self {
        self.compute_times.insert(key.into(), time);
        self
    }

    pub fn with_peak_mem(mut self, key: impl Into<String>, bytes: u64) -> Self {
        self.compute_peak_mem.insert(key.into(), bytes);
        self
    }

    pub fn with_mem_limit(mut self, bytes: u64) -> Self {
        self.mem_limit = bytes;
        self
    }

    /// Parses a TOML cost file (seconds, bytes, bytes per second).
    pub fn parse(text: &str) -> Result<Self> {
        let file: CostFile = toml::from_str(text)
            .map_err(|e| Error::Parse { source_name: "cost model".into(), message: e.to_string() })?;
        let link = LinkParams::from_secs(file.alpha, file.beta)?;
        if !(file.copy_bandwidth > 0.0) {
            return Err(Error::invalid("copy_bandwidth", "must be positive"));
        }
        let copy_bandwidth = bytes_from_f64("copy_bandwidth", file.copy_bandwidth)?;
        let mem_limit = bytes_from_f64("mem_limit", file.mem_limit)?;
        let mut model = CostModel::new(link, copy_bandwidth).with_mem_limit(mem_limit);
        for (key, secs) in file.compute_times {
            if !(secs >= 0.0) {
                return Err(Error::invalid(format!("compute_times.{key}"), "must be >= 0"));
            }
            model.compute_times.insert(key, Nanos::from_secs_f64(secs));
        }
        for (key, bytes) in file.compute_peak_mem {
            let b = bytes_from_f64(&format!("compute_peak_mem.{key}"), bytes)?;
            model.compute_peak_mem.insert(key, b);
        }
        Ok(model)
    }

    pub fn to_toml(&self) -> String {
        let inf_or = |v: u64| if v == u64::MAX { f64::INFINITY } else { v as f64 };
        let file = CostFile {
            alpha: self.link.alpha.as_secs_f64(),
            beta: self.link.beta_fs_per_byte as f64 * 1e-15,
            copy_bandwidth: inf_or(self.copy_bandwidth),
            mem_limit: inf_or(self.mem_limit),
            compute_times: self.compute_times.iter().map(|(k, v)| (k.clone(), v.as_secs_f64())).collect(),
            compute_peak_mem: self.compute_peak_mem.iter().map(|(k, &v)| (k.clone(), v as f64)).collect(),
        };
        toml::to_string(&file).expect("cost model serializes")
    }

    /// `alpha + beta * bytes`.
    pub fn comm_time(&self, bytes: u64) -> Nanos {
        self.link.alpha + self.link.transmit_time(bytes)
    }

    pub fn copy_time(&self, bytes: u64) -> Nanos {
        if self.copy_bandwidth == u64::MAX {
            return Nanos::ZERO;
        }
        let bw = self.copy_bandwidth as u128;
        Nanos(((bytes as u128 * 1_000_000_000 + bw / 2) / bw) as u64)
    }

    pub fn compute_time(&self, key: &str) -> Result<Nanos> {
        self.compute_times.get(key).copied().ok_or_else(|| Error::MissingCostKey(key.to_string()))
    }

    pub fn node_duration(&self, node: &Node) -> Result<Nanos> {
        Ok(match &node.kind {
            NodeKind::Compute { cost_key } => self.compute_time(cost_key)?,
            NodeKind::AllGather { bytes } | NodeKind::ReduceScatter { bytes } => self.comm_time(*bytes),
            NodeKind::CopyIn { bytes, .. } | NodeKind::CopyOut { bytes } => self.copy_time(*bytes),
            NodeKind::AllGatherWait { .. } | NodeKind::ReduceScatterWait { .. } => Nanos::ZERO,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum When {
    AtStart,
    AtEnd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MemoryEvent {
    pub delta: i64,
    pub when: When,
}

impl MemoryEvent {
    fn alloc(bytes: u64, when: When) -> Self {
        MemoryEvent { delta: bytes as i64, when }
    }

    fn free(bytes: u64, when: When) -> Self {
        MemoryEvent { delta: -(bytes as i64), when }
    }
}

/// Allocations and frees caused by one node, in application order.
///
/// Gathers allocate their full buffer when they start; the buffer is freed
/// at the end of the node carrying `release_bytes`. Gradient copy-ins
/// allocate the concatenated gradient buffer, which the reduce-scatter wait
/// swaps for the padded gradient shards. Forward compute allocates the
/// module's retained activations and the matching backward compute frees
/// them.
pub fn memory_events(graph: &Graph, id: NodeId, spec: &ModelSpec) -> Vec<MemoryEvent> {
    let node = graph.node(id);
    let mut events = Vec::new();
    match &node.kind {
        NodeKind::AllGather { bytes } => events.push(MemoryEvent::alloc(*bytes, When::AtStart)),
        NodeKind::CopyIn { bytes, into: Collective::ReduceScatter } => {
            events.push(MemoryEvent::alloc(*bytes, When::AtStart))
        }
        NodeKind::ReduceScatterWait { of } => {
            let gathered = graph.get(*of).map_or(0, |n| n.kind.bytes());
            let shards: u64 = node
                .param_refs
                .iter()
                .filter_map(|p| graph.param(p))
                .map(|p| shard_bytes(p.numel, graph.world_size(), p.grad_elem_bytes))
                .sum();
            events.push(MemoryEvent::free(gathered, When::AtEnd));
            events.push(MemoryEvent::alloc(shards, When::AtEnd));
        }
        NodeKind::Compute { .. } => {
            let act = spec.module(&node.module_path).map_or(0, |m| m.activation_bytes);
            if act > 0 {
                match node.phase {
                    Phase::Forward => events.push(MemoryEvent::alloc(act, When::AtStart)),
                    Phase::Backward => events.push(MemoryEvent::free(act, When::AtEnd)),
                }
            }
        }
        _ => {}
    }
    if node.release_bytes > 0 {
        events.push(MemoryEvent::free(node.release_bytes, When::AtEnd));
    }
    events
}

/// Per-parameter measurements consumed by auto-wrapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub param: String,
    /// Time to all-gather this parameter alone.
    pub t_ag: Nanos,
    /// Time to reduce-scatter this parameter's gradient alone.
    pub t_rs: Nanos,
    /// Compute time attributed to this parameter.
    pub t_c: Nanos,
    /// Peak compute memory attributed to this parameter.
    pub m_c: u64,
}

/// Profile entries in the spec's forward parameter order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileTable {
    pub entries: Vec<ProfileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    params: Vec<ProfileRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    name: String,
    t_ag: f64,
    t_rs: f64,
    t_c: f64,
    m_c: f64,
}

impl ProfileTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, param: &str) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.param == param)
    }

    /// Checks that the table lists exactly the spec's parameters, in order.
    pub fn check_covers(&self, spec: &ModelSpec) -> Result<()> {
        let names: Vec<&str> = spec.params().map(|(_, p)| p.name.as_str()).collect();
        let have: Vec<&str> = self.entries.iter().map(|e| e.param.as_str()).collect();
        if names != have {
            return Err(Error::Profile(format!(
                "profile covers {} parameters, spec has {}; first difference at {:?}",
                have.len(),
                names.len(),
                names.iter().zip(&have).position(|(a, b)| a != b).unwrap_or(names.len().min(have.len()))
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let file = ProfileFile {
            params: self
                .entries
                .iter()
                .map(|e| ProfileRecord {
                    name: e.param.clone(),
                    t_ag: e.t_ag.as_secs_f64(),
                    t_rs: e.t_rs.as_secs_f64(),
                    t_c: e.t_c.as_secs_f64(),
                    m_c: e.m_c as f64,
                })
                .collect(),
        };
        toml::to_string(&file).expect("profile serializes")
    }
}

/// Reads a TOML profile and orders it by the spec's parameters.
pub fn load_profile(text: &str, spec: &ModelSpec) -> Result<ProfileTable> {
    let file: ProfileFile =
        toml::from_str(text).map_err(|e| Error::Parse { source_name: "profile".into(), message: e.to_string() })?;
    let mut by_name: BTreeMap<String, ProfileRecord> = BTreeMap::new();
    for rec in file.params {
        for (field, v) in [("t_ag", rec.t_ag), ("t_rs", rec.t_rs), ("t_c", rec.t_c), ("m_c", rec.m_c)] {
            if !(v >= 0.0) {
                return Err(Error::Profile(format!("{}: {field} = {v} is negative", rec.name)));
            }
        }
        if by_name.contains_key(&rec.name) {
            return Err(Error::Profile(format!("duplicate entry for {}", rec.name)));
        }
        by_name.insert(rec.name.clone(), rec);
    }
    let known: BTreeSet<&str> = spec.params().map(|(_, p)| p.name.as_str()).collect();
    if let Some(extra) = by_name.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Profile(format!("entry {extra} is not a parameter of the spec")));
    }
    let mut entries = Vec::with_capacity(known.len());
    for (_, p) in spec.params() {
        let rec =
            by_name.get(&p.name).ok_or_else(|| Error::Profile(format!("missing entry for parameter {}", p.name)))?;
        entries.push(ProfileEntry {
            param: p.name.clone(),
            t_ag: Nanos::from_secs_f64(rec.t_ag),
            t_rs: Nanos::from_secs_f64(rec.t_rs),
            t_c: Nanos::from_secs_f64(rec.t_c),
            m_c: bytes_from_f64("m_c", rec.m_c)?,
        });
    }
    Ok(ProfileTable { entries })
}

/// Splits `total` across `weights` proportionally with largest-remainder
/// rounding, so the parts always sum back to `total`.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum == 0 {
        let mut parts = vec![0; weights.len()];
        parts[0] = total;
        return parts;
    }
    let mut parts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let exact = total as u128 * w as u128;
        parts.push((exact / sum) as u64);
        rems.push((exact % sum, i));
    }
    let leftover = total - parts.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(leftover as usize) {
        parts[i] += 1;
    }
    parts
}

/// Builds a profile from the analytic model: collective times from
/// `comm_time`, and each module's forward compute time and peak memory
/// split across its parameters by element count.
pub fn synthesize_profile(model: &CostModel, spec: &ModelSpec) -> Result<ProfileTable> {
    let mut entries = Vec::with_capacity(spec.param_count());
    for m in &spec.modules {
        let t = model.compute_time(&m.fwd_compute_key)?;
        model.compute_time(&m.bwd_compute_key)?;
        let mem = model.compute_peak_mem.get(&m.fwd_compute_key).copied().unwrap_or(0);
        let weights: Vec<u64> = m.params.iter().map(|p| p.numel).collect();
        let times = apportion(t.0, &weights);
        let mems = apportion(mem, &weights);
        for (i, p) in m.params.iter().enumerate() {
            entries.push(ProfileEntry {
                param: p.name.clone(),
                t_ag: model.comm_time(p.numel * p.elem_bytes),
                t_rs: model.comm_time(p.numel * p.grad_elem_bytes),
                t_c: Nanos(times[i]),
                m_c: mems[i],
            });
        }
    }
    Ok(ProfileTable { entries })
}
