//! Llama 3 model specs and two link regimes, shipped with the crate.
//!
//! The files under `specs/` are generated by `examples/gen_bundled.rs` from
//! the functions here; a test keeps them in sync.

use crate::cost::{CostModel, LinkParams};
use crate::model::{ModelSpec, ModuleSpec, ParameterSpec};
use crate::units::Nanos;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct LlamaConfig {
    pub name: &'static str,
    pub layers: u64,
    pub dim: u64,
    pub ffn_dim: u64,
    pub heads: u64,
    pub kv_heads: u64,
    pub vocab: u64,
}

pub const LLAMA3_8B: LlamaConfig =
    LlamaConfig { name: "llama3-8B", layers: 32, dim: 4096, ffn_dim: 14336, heads: 32, kv_heads: 8, vocab: 128256 };
pub const LLAMA3_70B: LlamaConfig =
    LlamaConfig { name: "llama3-70B", layers: 80, dim: 8192, ffn_dim: 28672, heads: 64, kv_heads: 8, vocab: 128256 };
pub const LLAMA3_405B: LlamaConfig = LlamaConfig {
    name: "llama3-405B",
    layers: 126,
    dim: 16384,
    ffn_dim: 53248,
    heads: 128,
    kv_heads: 8,
    vocab: 128256,
};

pub const CONFIGS: [LlamaConfig; 3] = [LLAMA3_8B, LLAMA3_70B, LLAMA3_405B];

pub const WORLD_SIZE: u32 = 8;
/// Tokens per device per step (batch 1 at sequence length 8192).
pub const TOKENS: u64 = 8192;
/// Sustained bf16 throughput used to turn FLOPs into time.
pub const FLOPS_PER_SEC: f64 = 4e14;
const ELEM: u64 = 2;
const GRAD_ELEM: u64 = 4;

pub const LLAMA3_8B_TOML: &str = include_str!("../../../specs/llama3-8B.toml");
pub const LLAMA3_70B_TOML: &str = include_str!("../../../specs/llama3-70B.toml");
pub const LLAMA3_405B_TOML: &str = include_str!("../../../specs/llama3-405B.toml");
pub const COST_SINGLE_NODE_TOML: &str = include_str!("../../../specs/cost-single-node.toml");
pub const COST_INTER_NODE_TOML: &str = include_str!("../../../specs/cost-inter-node.toml");

/// Bundled file contents by short name (`llama3-8B`, `cost-inter-node`, ...).
pub fn lookup(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    Some(match name {
        "llama3-8B" => LLAMA3_8B_TOML,
        "llama3-70B" => LLAMA3_70B_TOML,
        "llama3-405B" => LLAMA3_405B_TOML,
        "cost-single-node" => COST_SINGLE_NODE_TOML,
        "cost-inter-node" => COST_INTER_NODE_TOML,
        _ => return None,
    })
}

impl LlamaConfig {
    pub fn head_dim(&self) -> u64 {
        self.dim / self.heads
    }

    fn key(&self, module: &str, phase: &str) -> String {
        format!("{}/{module}.{phase}", self.name)
    }

    /// Forward FLOPs and retained activation bytes of each module kind.
    fn module_kinds(&self) -> [(&'static str, f64, u64); 6] {
        let (t, d, f, v) = (TOKENS as f64, self.dim as f64, self.ffn_dim as f64, self.vocab as f64);
        let kv = (self.kv_heads * self.head_dim()) as f64;
        let act = |elems: f64| (elems * ELEM as f64) as u64;
        [
            ("tok_embeddings", t * d, 0),
            ("norm", 5.0 * t * d, act(t * d)),
            // projections plus causal attention scores and weighted sum
            ("attention", 2.0 * t * (2.0 * d * d + 2.0 * d * kv) + 2.0 * t * t * d, act(t * (3.0 * d + 2.0 * kv))),
            ("feed_forward", 2.0 * t * 3.0 * d * f, act(t * (d + 3.0 * f))),
            ("output", 2.0 * t * d * v, act(t * d) + (t * v) as u64 * 4),
            ("final_norm", 5.0 * t * d, act(t * d)),
        ]
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (d, f, v) = (self.dim, self.ffn_dim, self.vocab);
        let kv = self.kv_heads * self.head_dim();
        let kinds = self.module_kinds();
        let act = |kind: &str| kinds.iter().find(|k| k.0 == kind).unwrap().2;
        let module = |name: String, kind: &str, params: Vec<(&str, u64)>| ModuleSpec {
            fwd_compute_key: self.key(kind, "fwd"),
            bwd_compute_key: self.key(kind, "bwd"),
            activation_bytes: act(kind),
            params: params
                .into_iter()
                .map(|(p, numel)| ParameterSpec {
                    name: format!("{name}.{p}"),
                    numel,
                    elem_bytes: ELEM,
                    grad_elem_bytes: GRAD_ELEM,
                })
                .collect(),
            name,
        };
        let mut modules = vec![module("tok_embeddings".into(), "tok_embeddings", vec![("weight", v * d)])];
        for i in 0..self.layers {
            let l = format!("layers.{i}");
            modules.push(module(format!("{l}.attention_norm"), "norm", vec![("weight", d)]));
            modules.push(module(
                format!("{l}.attention"),
                "attention",
                vec![("wq.weight", d * d), ("wk.weight", d * kv), ("wv.weight", d * kv), ("wo.weight", d * d)],
            ));
            modules.push(module(format!("{l}.ffn_norm"), "norm", vec![("weight", d)]));
            modules.push(module(
                format!("{l}.feed_forward"),
                "feed_forward",
                vec![("w1.weight", f * d), ("w2.weight", d * f), ("w3.weight", f * d)],
            ));
        }
        modules.push(module("norm".into(), "final_norm", vec![("weight", d)]));
        modules.push(module("output".into(), "output", vec![("weight", v * d)]));
        ModelSpec { name: self.name.into(), world_size: WORLD_SIZE, modules }
    }

    /// Adds this model's compute times (backward twice forward) and peak
    /// compute memory to `model`.
    pub fn add_compute(&self, mut model: CostModel) -> CostModel {
        for (kind, flops, act) in self.module_kinds() {
            let fwd = Nanos::from_secs_f64(flops / FLOPS_PER_SEC);
            model = model
                .with_compute(self.key(kind, "fwd"), fwd)
                .with_compute(self.key(kind, "bwd"), Nanos(fwd.0 * 2))
                .with_peak_mem(self.key(kind, "fwd"), act);
        }
        model
    }
}

/// One node, intra-node links: small latency, fast links.
pub fn single_node_link() -> LinkParams {
    LinkParams::from_secs(2e-6, 5e-12).expect("valid link")
}

/// Several nodes: large latency, slow links.
pub fn inter_node_link() -> LinkParams {
    LinkParams::from_secs(5e-5, 1e-9).expect("valid link")
}

pub const COPY_BANDWIDTH: u64 = 1_000_000_000_000;

/// Cost model covering every bundled model under `link`.
pub fn cost_model(link: LinkParams) -> CostModel {
    CONFIGS.iter().fold(CostModel::new(link, COPY_BANDWIDTH), |m, c| c.add_compute(m))
}
