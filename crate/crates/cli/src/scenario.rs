//! Scenario configuration: an optional TOML file overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fsdpsim::bundled;
use fsdpsim::cost::{load_profile, synthesize_profile};
use fsdpsim::model::parse_model_spec;
use fsdpsim::passes::Placement;
use fsdpsim::{CostModel, ModelSpec, ProfileTable, ReorderPolicy};

#[derive(Copy, Clone, Debug, PartialEq, Eq, clap::ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Vanilla,
    Manual,
    Auto,
}

/// Scenario file contents. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub label: Option<String>,
    pub spec: Option<String>,
    pub cost: Option<String>,
    pub profile: Option<String>,
    pub plan: Option<PlanSource>,
    #[serde(default)]
    pub modules: Vec<String>,
    pub fwd_placement: Option<String>,
    pub bwd_placement: Option<String>,
    pub reorder: Option<bool>,
    pub mem_limit: Option<String>,
    pub out: Option<String>,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let mut file: ScenarioFile =
            toml::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut file.spec, &mut file.cost, &mut file.profile, &mut file.out].into_iter().flatten() {
            let joined = base.join(&*p);
            // bundled names stay as they are unless a file shadows them
            if joined.exists() || bundled::lookup(p).is_none() {
                *p = joined.to_string_lossy().into_owned();
            }
        }
        Ok(file)
    }
}

#[derive(Debug)]
pub struct ScenarioConfig {
    pub label: String,
    pub spec: ModelSpec,
    pub model: CostModel,
    pub profile: Option<ProfileTable>,
    pub plan_source: PlanSource,
    pub modules: Vec<String>,
    /// `None` keeps the unprefetched order.
    pub policy: Option<ReorderPolicy>,
    pub out: PathBuf,
}

impl ScenarioConfig {
    /// The supplied profile, or one derived from the cost model.
    pub fn profile(&self) -> Result<ProfileTable> {
        match &self.profile {
            Some(p) => Ok(p.clone()),
            None => synthesize_profile(&self.model, &self.spec).context("deriving a profile from the cost model"),
        }
    }
}

/// Reads a file, falling back to the bundled copy of that name.
pub fn read_input(path: &str) -> Result<String> {
    let p = Path::new(path);
    if p.exists() {
        return fs::read_to_string(p).with_context(|| format!("reading {path}"));
    }
    match bundled::lookup(path) {
        Some(text) => Ok(text.to_string()),
        None => bail!("{path}: no such file or bundled spec"),
    }
}

pub fn load_spec(path: &str) -> Result<ModelSpec> {
    parse_model_spec(&read_input(path)?).with_context(|| format!("model spec {path}"))
}

pub fn load_cost(path: &str) -> Result<CostModel> {
    CostModel::parse(&read_input(path)?).with_context(|| format!("cost file {path}"))
}

pub fn load_profile_file(path: &str, spec: &ModelSpec) -> Result<ProfileTable> {
    load_profile(&read_input(path)?, spec).with_context(|| format!("profile {path}"))
}

/// Bytes, or `inf` for no limit.
pub fn parse_mem_limit(s: &str) -> Result<u64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("unlimited") {
        return Ok(u64::MAX);
    }
    if let Ok(v) = t.parse::<u64>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v >= 0.0 => Ok(if v >= u64::MAX as f64 { u64::MAX } else { v.round() as u64 }),
        _ => bail!("--mem-limit: `{s}` is not a byte count or `inf`"),
    }
}

pub fn parse_placement(s: &str) -> Result<Placement> {
    s.parse().map_err(|e| anyhow::anyhow!("{e}"))
}
