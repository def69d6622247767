//! Fixtures shared by the benchmarks.

use fsdpsim::bundled::{COST_SINGLE_NODE_TOML, LLAMA3_8B_TOML};
use fsdpsim::model::parse_model_spec;
use fsdpsim::{build_fsdp_graph, manual_plan, BucketPlan, CostModel, Graph, ModelSpec};

pub struct Fixture {
    pub spec: ModelSpec,
    pub model: CostModel,
    pub graph: Graph,
    /// One bucket per transformer block.
    pub blocks: BucketPlan,
}

pub fn llama3_8b() -> Fixture {
    let spec = parse_model_spec(LLAMA3_8B_TOML).expect("bundled spec");
    let model = CostModel::parse(COST_SINGLE_NODE_TOML).expect("bundled cost");
    let graph = build_fsdp_graph(&spec).expect("graph");
    let names: Vec<String> = (0..32).map(|i| format!("layers.{i}")).collect();
    let blocks = manual_plan(&graph, &names).expect("plan");
    Fixture { spec, model, graph, blocks }
}
