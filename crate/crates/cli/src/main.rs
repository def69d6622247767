use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsdpsim::oracle::{greedy_gap, SearchBudget, MAX_SEARCH_PARAMS};
use fsdpsim::pipeline::run_on_graph;
use fsdpsim::{
    auto_plan, build_fsdp_graph, check_plan, compare, manual_plan, sharded_param_bytes, BucketPlan, Graph, Phase,
    ReorderPolicy, SimReport,
};

mod scenario;

use scenario::{
    load_cost, load_profile_file, load_spec, parse_mem_limit, parse_placement, PlanSource, ScenarioConfig, ScenarioFile,
};

#[derive(Parser)]
#[command(name = "fsdpsim", version, about = "FSDP bucketing/reordering planner and two-stream simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower a model spec to its per-parameter FSDP graph.
    Build {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value = "fsdpsim-out")]
        out: PathBuf,
    },
    /// Choose a bucket plan.
    Plan(ScenarioArgs),
    /// Bucket, reorder and simulate one scenario.
    Simulate(ScenarioArgs),
    /// Tabulate reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustively search plans and placements on a small model.
    Oracle {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = MAX_SEARCH_PARAMS)]
        max_params: usize,
    },
}

#[derive(Args, Clone, Default)]
struct ScenarioArgs {
    /// Scenario TOML; flags override its values.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Model spec file or bundled name (llama3-8B, llama3-70B, llama3-405B).
    #[arg(long)]
    spec: Option<String>,
    /// Cost file or bundled name (cost-single-node, cost-inter-node).
    #[arg(long)]
    cost: Option<String>,
    /// Per-parameter profile; derived from the cost file when absent.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_enum)]
    plan: Option<PlanSource>,
    /// Modules to wrap for --plan manual (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    modules: Vec<String>,
    #[arg(long)]
    fwd_placement: Option<String>,
    #[arg(long)]
    bwd_placement: Option<String>,
    /// Keep the unprefetched program order.
    #[arg(long)]
    no_reorder: bool,
    /// Memory limit for --plan auto, in bytes or `inf`.
    #[arg(long)]
    mem_limit: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let file = match &self.scenario {
            Some(p) => ScenarioFile::load(p)?,
            None => ScenarioFile::default(),
        };
        let Some(spec_path) = self.spec.clone().or(file.spec) else { bail!("--spec is required") };
        let Some(cost_path) = self.cost.clone().or(file.cost) else { bail!("--cost is required") };
        let spec = load_spec(&spec_path)?;
        let mut model = load_cost(&cost_path)?;
        if let Some(m) = self.mem_limit.clone().or(file.mem_limit) {
            model.mem_limit = parse_mem_limit(&m)?;
        }
        let profile = match self.profile.clone().or(file.profile) {
            Some(p) => Some(load_profile_file(&p, &spec)?),
            None => None,
        };
        let plan_source = self.plan.or(file.plan).unwrap_or(PlanSource::Vanilla);
        let modules = if self.modules.is_empty() { file.modules } else { self.modules.clone() };
        if plan_source == PlanSource::Manual && modules.is_empty() {
            bail!("--plan manual needs --modules");
        }
        let mut policy = ReorderPolicy::default();
        if let Some(p) = self.fwd_placement.clone().or(file.fwd_placement) {
            policy.fwd_ag_placement = parse_placement(&p)?;
        }
        if let Some(p) = self.bwd_placement.clone().or(file.bwd_placement) {
            policy.bwd_ag_placement = parse_placement(&p)?;
        }
        let reorder = !self.no_reorder && file.reorder.unwrap_or(true);
        let out = self.out.clone().or(file.out.map(PathBuf::from)).unwrap_or_else(|| "fsdpsim-out".into());
        let label = self.label.clone().or(file.label).unwrap_or_else(|| {
            let plan = match plan_source {
                PlanSource::Vanilla => "vanilla",
                PlanSource::Manual => "manual",
                PlanSource::Auto => "auto",
            };
            if reorder {
                format!("{plan}+reorder({policy})")
            } else {
                plan.to_string()
            }
        });
        Ok(ScenarioConfig { label, spec, model, profile, plan_source, modules, policy: reorder.then_some(policy), out })
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn summarize(graph: &Graph) -> String {
    let mut counts: BTreeMap<(Phase, &str), (usize, u64)> = BTreeMap::new();
    for n in graph.nodes() {
        let e = counts.entry((n.phase, n.kind.tag())).or_default();
        e.0 += 1;
        e.1 += n.kind.bytes();
    }
    let mut s = format!(
        "{}: {} parameters, {} nodes, {} edges, world size {}\n",
        graph.model_name(),
        graph.params().len(),
        graph.len(),
        graph.edges().count(),
        graph.world_size()
    );
    for ((phase, tag), (n, bytes)) in counts {
        s += &format!("  {} {tag:<4} {n:>6} nodes {bytes:>16} bytes\n", phase.short());
    }
    s
}

/// Bucket plan for a scenario, plus the greedy trace for auto plans.
fn choose_plan(cfg: &ScenarioConfig, graph: &Graph) -> Result<(BucketPlan, Option<String>)> {
    let names: Vec<&str> = graph.params().iter().map(|p| p.name.as_str()).collect();
    Ok(match cfg.plan_source {
        PlanSource::Vanilla => (BucketPlan::singletons(&names), None),
        PlanSource::Manual => {
            let plan = manual_plan(graph, &cfg.modules)?;
            if let Ok(profile) = cfg.profile() {
                for v in check_plan(&plan, &cfg.spec, &profile, &cfg.model) {
                    eprintln!("note: {v}");
                }
            }
            (plan, None)
        }
        PlanSource::Auto => {
            let report = auto_plan(&cfg.spec, &cfg.profile()?, &cfg.model)?;
            (report.plan.clone(), Some(report.trace_text()))
        }
    })
}

fn print_report(r: &SimReport) {
    println!("scenario      {}", r.label);
    println!("total_time    {}", r.total_time);
    println!("exposed_comm  {}", r.exposed_comm);
    println!("compute_busy  {}", r.compute_busy);
    println!("comm_busy     {}", r.comm_busy);
    println!("peak_memory   {} bytes", r.peak_memory);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { spec, out } => {
            let spec = load_spec(&spec)?;
            let graph = build_fsdp_graph(&spec)?;
            write(&out, "graph.txt", &graph.to_text())?;
            print!("{}", summarize(&graph));
            println!("  sharded parameter bytes per device: {}", sharded_param_bytes(&spec));
        }
        Command::Plan(args) => {
            let cfg = args.resolve()?;
            let graph = build_fsdp_graph(&cfg.spec)?;
            let (plan, trace) = choose_plan(&cfg, &graph)?;
            write(&cfg.out, "plan.txt", &plan.to_text())?;
            if let Some(trace) = trace {
                write(&cfg.out, "trace.txt", &trace)?;
            }
            println!("{} buckets over {} parameters", plan.len(), graph.params().len());
            println!("sizes {:?}", plan.sizes());
        }
        Command::Simulate(args) => {
            let cfg = args.resolve()?;
            let base = build_fsdp_graph(&cfg.spec)?;
            let (plan, trace) = choose_plan(&cfg, &base)?;
            let bucketed = (cfg.plan_source != PlanSource::Vanilla).then_some(&plan);
            let run = run_on_graph(&base, &cfg.spec, &cfg.model, bucketed, cfg.policy)?;
            let report = run.report.with_label(cfg.label.clone());
            write(&cfg.out, "graph.txt", &run.graph.to_text())?;
            write(&cfg.out, "plan.txt", &plan.to_text())?;
            if let Some(trace) = trace {
                write(&cfg.out, "trace.txt", &trace)?;
            }
            write(&cfg.out, "report.txt", &report.to_text())?;
            write(&cfg.out, "trace.json", &report.chrome_trace())?;
            print_report(&report);
        }
        Command::Compare { reports, out } => {
            let mut parsed = Vec::new();
            for p in &reports {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut r = SimReport::parse(&text).with_context(|| format!("report {}", p.display()))?;
                if r.label.is_empty() {
                    r.label = p.display().to_string();
                }
                parsed.push(r);
            }
            let table = compare(&parsed)?.to_string();
            print!("{table}");
            if let Some(out) = out {
                fs::write(&out, &table).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Oracle { scenario, max_params } => {
            let cfg = scenario.resolve()?;
            let budget = SearchBudget { max_params, ..SearchBudget::default() };
            let gap = greedy_gap(&cfg.spec, &cfg.profile()?, &cfg.model, budget)?;
            let best = &gap.oracle;
            let report = best.report.clone().with_label(format!("oracle({})", best.policy));
            let base = build_fsdp_graph(&cfg.spec)?;
            let bucketed = run_on_graph(&base, &cfg.spec, &cfg.model, Some(&best.plan), Some(best.policy))?.graph;
            write(&cfg.out, "graph.txt", &bucketed.to_text())?;
            write(&cfg.out, "plan.txt", &best.plan.to_text())?;
            write(&cfg.out, "report.txt", &report.to_text())?;
            write(&cfg.out, "trace.json", &report.chrome_trace())?;
            let table = compare(&[
                gap.vanilla.clone().with_label("vanilla"),
                gap.greedy.clone().with_label("auto+reorder"),
                report.clone(),
            ])?
            .to_string();
            write(&cfg.out, "compare.txt", &table)?;
            println!("evaluated {} variants", best.evaluated);
            println!("oracle plan sizes {:?} policy {}", best.plan.sizes(), best.policy);
            println!("greedy plan sizes {:?}", gap.greedy_plan.sizes());
            println!("greedy gap {}", gap.gap());
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
