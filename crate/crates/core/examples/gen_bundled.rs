//! Regenerates the bundled spec and cost files: `cargo run -p fsdpsim-core --example gen_bundled`.

use std::fs;
use std::path::Path;

use fsdpsim::bundled::{cost_model, inter_node_link, single_node_link, CONFIGS};

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs");
    fs::create_dir_all(&dir)?;
    for c in CONFIGS {
        fs::write(dir.join(format!("{}.toml", c.name)), c.model_spec().to_toml())?;
    }
    fs::write(dir.join("cost-single-node.toml"), cost_model(single_node_link()).to_toml())?;
    fs::write(dir.join("cost-inter-node.toml"), cost_model(inter_node_link()).to_toml())?;
    Ok(())
}
