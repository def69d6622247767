//! Declarative model descriptions and their lowering to the per-parameter
//! ("vanilla") FSDP graph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Collective, Graph, NodeId, NodeKind, ParamInfo, Phase};
use crate::units::shard_bytes;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub numel: u64,
    /// Bytes per element of the gathered parameter (param dtype).
    pub elem_bytes: u64,
    /// Bytes per element of the reduced gradient (reduce dtype).
    pub grad_elem_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    pub fwd_compute_key: String,
    pub bwd_compute_key: String,
    /// Activation bytes the forward retains until this module's backward.
    #[serde(default)]
    pub activation_bytes: u64,
    #[serde(default)]
    pub params: Vec<ParameterSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub world_size: u32,
    pub modules: Vec<ModuleSpec>,
}

impl ModelSpec {
    /// Parameters in forward execution order with their owning module.
    pub fn params(&self) -> impl Iterator<Item = (&ModuleSpec, &ParameterSpec)> + '_ {
        self.modules.iter().flat_map(|m| m.params.iter().map(move |p| (m, p)))
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(|m| m.params.len()).sum()
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn param(&self, name: &str) -> Option<(&ModuleSpec, &ParameterSpec)> {
        self.params().find(|(_, p)| p.name == name)
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.params()
            .map(|(m, p)| ParamInfo {
                name: p.name.clone(),
                module: m.name.clone(),
                numel: p.numel,
                elem_bytes: p.elem_bytes,
                grad_elem_bytes: p.grad_elem_bytes,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_name("name", &self.name)?;
        if self.world_size < 1 {
            return Err(Error::invalid("world_size", "must be at least 1"));
        }
        if self.modules.is_empty() {
            return Err(Error::invalid("modules", "a model needs at least one module"));
        }
        let mut module_names = BTreeSet::new();
        let mut param_names = BTreeSet::new();
        for (mi, m) in self.modules.iter().enumerate() {
            let at = format!("modules[{mi}]");
            check_name(&format!("{at}.name"), &m.name)?;
            if !module_names.insert(m.name.as_str()) {
                return Err(Error::invalid(format!("{at}.name"), format!("duplicate module `{}`", m.name)));
            }
            check_name(&format!("{at}.fwd_compute_key"), &m.fwd_compute_key)?;
            check_name(&format!("{at}.bwd_compute_key"), &m.bwd_compute_key)?;
            for (pi, p) in m.params.iter().enumerate() {
                let at = format!("{at}.params[{pi}]");
                check_name(&format!("{at}.name"), &p.name)?;
                if !param_names.insert(p.name.as_str()) {
                    return Err(Error::invalid(format!("{at}.name"), format!("duplicate parameter `{}`", p.name)));
                }
                if p.numel == 0 {
                    return Err(Error::invalid(format!("{at}.numel"), "must be positive"));
                }
                if ![1, 2, 4, 8].contains(&p.elem_bytes) {
                    return Err(Error::invalid(
                        format!("{at}.elem_bytes"),
                        format!("{} is not one of 1, 2, 4, 8", p.elem_bytes),
                    ));
                }
                if ![2, 4, 8].contains(&p.grad_elem_bytes) {
                    return Err(Error::invalid(
                        format!("{at}.grad_elem_bytes"),
                        format!("{} is not one of 2, 4, 8", p.grad_elem_bytes),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }
}

// Names end up in whitespace- and comma-separated text formats.
fn check_name(field: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid(field, "must not be empty"));
    }
    if value.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(Error::invalid(field, format!("`{value}` contains whitespace or a comma")));
    }
    Ok(())
}

/// Parses and validates a TOML model description.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec =
        toml::from_str(text).map_err(|e| Error::Parse { source_name: "model spec".into(), message: e.to_string() })?;
    spec.validate()?;
    Ok(spec)
}

/// Per-device resident weight memory: every parameter's padded shard.
pub fn sharded_param_bytes(spec: &ModelSpec) -> u64 {
    spec.params().map(|(_, p)| shard_bytes(p.numel, spec.world_size, p.elem_bytes)).sum()
}

/// Padded gradient shards left on each device after the reduce-scatters.
/// Single-device runs emit no gradient communication and are not charged.
pub fn sharded_grad_bytes(spec: &ModelSpec) -> u64 {
    if spec.world_size == 1 {
        return 0;
    }
    spec.params().map(|(_, p)| shard_bytes(p.numel, spec.world_size, p.grad_elem_bytes)).sum()
}

/// Memory the step leaves behind once every transient buffer is freed.
pub fn resident_after_step(spec: &ModelSpec) -> u64 {
    sharded_param_bytes(spec) + sharded_grad_bytes(spec)
}

/// Lowers a spec into the vanilla FSDP graph: per-parameter gather, wait and
/// copy-out before each module's forward; the same again (re-gather) before
/// each backward, in reverse module order, followed by per-parameter gradient
/// copy-in, reduce-scatter and wait.
pub fn build_fsdp_graph(spec: &ModelSpec) -> Result<Graph> {
    spec.validate()?;
    let mut g = Graph::new(spec.name.clone(), spec.world_size, spec.param_infos());
    let sharded = spec.world_size > 1;

    let mut prev: Option<NodeId> = None;
    for m in &spec.modules {
        let copies = if sharded { gather_chain(&mut g, m, Phase::Forward) } else { vec![] };
        let c = g.add_node(
            NodeKind::Compute { cost_key: m.fwd_compute_key.clone() },
            Phase::Forward,
            m.name.clone(),
            param_names(m),
        );
        for co in copies {
            g.add_edge(co, c);
        }
        if let Some(p) = prev {
            g.add_edge(p, c);
        }
        prev = Some(c);
    }

    for m in spec.modules.iter().rev() {
        let copies = if sharded { gather_chain(&mut g, m, Phase::Backward) } else { vec![] };
        let c = g.add_node(
            NodeKind::Compute { cost_key: m.bwd_compute_key.clone() },
            Phase::Backward,
            m.name.clone(),
            param_names(m),
        );
        for co in copies {
            g.add_edge(co, c);
        }
        if let Some(p) = prev {
            g.add_edge(p, c);
        }
        prev = Some(c);
        if sharded {
            for p in &m.params {
                let grad = p.numel * p.grad_elem_bytes;
                let refs = vec![p.name.clone()];
                let ci = g.add_node(
                    NodeKind::CopyIn { bytes: grad, into: Collective::ReduceScatter },
                    Phase::Backward,
                    m.name.clone(),
                    refs.clone(),
                );
                let rs =
                    g.add_node(NodeKind::ReduceScatter { bytes: grad }, Phase::Backward, m.name.clone(), refs.clone());
                let w = g.add_node(NodeKind::ReduceScatterWait { of: rs }, Phase::Backward, m.name.clone(), refs);
                g.add_edge(c, ci);
                g.add_edge(ci, rs);
                g.add_edge(rs, w);
            }
        }
    }
    g.assign_buffer_releases();
    Ok(g)
}

fn param_names(m: &ModuleSpec) -> Vec<String> {
    m.params.iter().map(|p| p.name.clone()).collect()
}

fn gather_chain(g: &mut Graph, m: &ModuleSpec, phase: Phase) -> Vec<NodeId> {
    let mut copies = Vec::with_capacity(m.params.len());
    for p in &m.params {
        let bytes = p.numel * p.elem_bytes;
        let refs = vec![p.name.clone()];
        let ag = g.add_node(NodeKind::AllGather { bytes }, phase, m.name.clone(), refs.clone());
        let w = g.add_node(NodeKind::AllGatherWait { of: ag }, phase, m.name.clone(), refs.clone());
        let co = g.add_node(NodeKind::CopyOut { bytes }, phase, m.name.clone(), refs);
        g.add_edge(ag, w);
        g.add_edge(w, co);
        copies.push(co);
    }
    copies
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Stream;

    const MINIMAL: &str = r#"
name = "tiny"
world_size = 4

[[modules]]
name = "layer"
fwd_compute_key = "layer.fwd"
bwd_compute_key = "layer.bwd"
activation_bytes = 64

[[modules.params]]
name = "layer.weight"
numel = 100
elem_bytes = 2
grad_elem_bytes = 4
"#;

    fn count(g: &Graph, phase: Phase, tag: &str) -> usize {
        g.nodes().filter(|n| n.phase == phase && n.kind.tag() == tag).count()
    }

    #[test]
    fn minimal_document_parses() {
        let spec = parse_model_spec(MINIMAL).unwrap();
        assert_eq!(spec.modules.len(), 1);
        assert_eq!(spec.param_count(), 1);
    }

    #[test]
    fn zero_numel_is_rejected_by_field() {
        let err = parse_model_spec(&MINIMAL.replace("numel = 100", "numel = 0")).unwrap_err();
        assert!(err.to_string().contains("modules[0].params[0].numel"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected_with_location() {
        let err = parse_model_spec(&MINIMAL.replace("world_size = 4", "world_size = 4\nflops = 3")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("flops") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn bad_dtype_widths_are_rejected() {
        assert!(parse_model_spec(&MINIMAL.replace("elem_bytes = 2", "elem_bytes = 3")).is_err());
        assert!(parse_model_spec(&MINIMAL.replace("grad_elem_bytes = 4", "grad_elem_bytes = 1")).is_err());
    }

    #[test]
    fn one_parameter_graph_shape() {
        let g = build_fsdp_graph(&parse_model_spec(MINIMAL).unwrap()).unwrap();
        assert!(g.validate().is_empty());
        let fwd = g.nodes().filter(|n| n.phase == Phase::Forward).count();
        let bwd = g.nodes().filter(|n| n.phase == Phase::Backward).count();
        assert_eq!((fwd, bwd), (4, 7));
        for tag in ["AG", "WAG", "CO", "C"] {
            assert_eq!(count(&g, Phase::Forward, tag), 1, "{tag}");
            assert_eq!(count(&g, Phase::Backward, tag), 1, "{tag}");
        }
        for tag in ["CIRS", "RS", "WRS"] {
            assert_eq!(count(&g, Phase::Backward, tag), 1, "{tag}");
        }
        let rs = g.nodes().find(|n| n.kind.tag() == "RS").unwrap();
        assert_eq!(rs.kind.bytes(), 400);
        assert_eq!(rs.stream, Stream::Communication);
        // gathered buffers free at their consuming compute
        let releases: Vec<_> = g.nodes().filter(|n| n.release_bytes > 0).collect();
        assert_eq!(releases.len(), 2);
        assert!(releases.iter().all(|n| n.kind.tag() == "C" && n.release_bytes == 200));
    }

    #[test]
    fn single_device_emits_only_compute() {
        let g =
            build_fsdp_graph(&parse_model_spec(&MINIMAL.replace("world_size = 4", "world_size = 1")).unwrap()).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.nodes().all(|n| matches!(n.kind, NodeKind::Compute { .. })));
    }

    #[test]
    fn sharded_bytes_examples() {
        let mut spec = parse_model_spec(MINIMAL).unwrap();
        assert_eq!(sharded_param_bytes(&spec), 50);
        spec.modules[0].params[0].numel = 10;
        assert_eq!(sharded_param_bytes(&spec), 6);
        spec.world_size = 1;
        assert_eq!(sharded_param_bytes(&spec), 20);
        assert_eq!(sharded_grad_bytes(&spec), 0);
    }

    #[test]
    fn construction_is_deterministic() {
        let spec = parse_model_spec(MINIMAL).unwrap();
        assert_eq!(build_fsdp_graph(&spec).unwrap(), build_fsdp_graph(&spec).unwrap());
    }
}
