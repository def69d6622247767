//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any FAIL.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fsdpsim::bundled::{COST_INTER_NODE_TOML, COST_SINGLE_NODE_TOML, LLAMA3_8B_TOML};
use fsdpsim::model::{parse_model_spec, resident_after_step};
use fsdpsim::oracle::{greedy_gap, retime_events, SearchBudget};
use fsdpsim::passes::{forward_gather_wait, hoist_forward_gather, Placement};
use fsdpsim::testkit::{self, instance};
use fsdpsim::{
    apply_bucketing, auto_plan, build_fsdp_graph, check_plan, manual_plan, reorder, run_scenario, simulate,
    vanilla_schedule, BucketPlan, CostModel, Graph, LinkParams, ModelSpec, Nanos, NodeKind, Phase, ProfileEntry,
    ProfileTable, ReorderPolicy, Schedule, SimReport,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn llama8b() -> ModelSpec {
    parse_model_spec(LLAMA3_8B_TOML).expect("bundled spec parses")
}

/// One bucket per transformer block; embeddings, final norm and output
/// stay alone.
fn block_plan(spec: &ModelSpec) -> BucketPlan {
    let g = build_fsdp_graph(spec).unwrap();
    let layers = spec.modules.iter().filter(|m| m.name.ends_with(".attention")).count();
    let names: Vec<String> = (0..layers).map(|i| format!("layers.{i}")).collect();
    manual_plan(&g, &names).unwrap()
}

struct Ablation {
    vanilla: SimReport,
    reorder: SimReport,
    bucket: SimReport,
    both: SimReport,
}

fn ablation(cost: &str) -> Ablation {
    let spec = llama8b();
    let model = CostModel::parse(cost).unwrap();
    let plan = block_plan(&spec);
    let run = |p: Option<&BucketPlan>, r: Option<ReorderPolicy>| run_scenario(&spec, &model, p, r).unwrap().report;
    Ablation {
        vanilla: run(None, None),
        reorder: run(None, Some(ReorderPolicy::default())),
        bucket: run(Some(&plan), None),
        both: run(Some(&plan), Some(ReorderPolicy::default())),
    }
}

fn times(a: &Ablation) -> String {
    format!(
        "vanilla {} | reorder {} | bucket {} | reorder+bucket {}",
        a.vanilla.total_time, a.reorder.total_time, a.bucket.total_time, a.both.total_time
    )
}

fn criterion_1() -> Check {
    let a = ablation(COST_INTER_NODE_TOML);
    ensure(a.both.total_time < a.reorder.total_time, || format!("reorder+bucket !< reorder: {}", times(&a)))?;
    ensure(a.reorder.total_time < a.vanilla.total_time, || format!("reorder !< vanilla: {}", times(&a)))?;
    ensure(a.bucket.total_time < a.vanilla.total_time, || format!("bucket !< vanilla: {}", times(&a)))?;
    Ok(times(&a))
}

fn criterion_2() -> Check {
    let a = ablation(COST_SINGLE_NODE_TOML);
    ensure(a.reorder.total_time < a.vanilla.total_time, || format!("reorder !< vanilla: {}", times(&a)))?;
    ensure(a.bucket.total_time > a.vanilla.total_time, || format!("bucket !> vanilla: {}", times(&a)))?;
    ensure(a.reorder.peak_memory >= a.vanilla.peak_memory, || "peak: reorder < vanilla".into())?;
    ensure(a.both.peak_memory >= a.reorder.peak_memory, || "peak: reorder+bucket < reorder".into())?;
    Ok(format!(
        "{}; peak vanilla {} reorder {} reorder+bucket {}",
        times(&a),
        a.vanilla.peak_memory,
        a.reorder.peak_memory,
        a.both.peak_memory
    ))
}

fn criterion_3() -> Check {
    let spec = llama8b();
    let plan = block_plan(&spec);
    let mut notes = Vec::new();
    for (regime, cost) in [("single-node", COST_SINGLE_NODE_TOML), ("inter-node", COST_INTER_NODE_TOML)] {
        let model = CostModel::parse(cost).unwrap();
        for bwd in Placement::ALL {
            let run = |fwd| {
                let policy = ReorderPolicy { fwd_ag_placement: fwd, bwd_ag_placement: bwd };
                run_scenario(&spec, &model, Some(&plan), Some(policy)).unwrap().report
            };
            let (before, after) = (run(Placement::BeforeLastWait), run(Placement::AfterLastWait));
            ensure(before.total_time <= after.total_time, || {
                format!("{regime} bwd={bwd}: before {} > after {}", before.total_time, after.total_time)
            })?;
            ensure(before.peak_memory >= after.peak_memory, || {
                format!("{regime} bwd={bwd}: peak before {} < after {}", before.peak_memory, after.peak_memory)
            })?;
            notes.push(format!("{regime} bwd={bwd}: {} vs {}", before.total_time, after.total_time));
        }
    }
    Ok(notes.join("; "))
}

fn criterion_4() -> Check {
    let cases = 1000;
    for seed in 0..cases {
        let mut rng = testkit::rng(0xa1_0000 + seed);
        let spec = testkit::random_spec(&mut rng, 12);
        let model = testkit::random_cost(&mut rng, &spec);
        let profile = testkit::random_profile(&mut rng, &spec);
        let report = auto_plan(&spec, &profile, &model).map_err(|e| format!("seed {seed}: {e}"))?;
        let v = check_plan(&report.plan, &spec, &profile, &model);
        ensure(v.is_empty(), || format!("seed {seed}: {}", v[0]))?;

        // memory limit below every parameter's compute memory
        let floor: Vec<ProfileEntry> =
            profile.entries.iter().map(|e| ProfileEntry { m_c: e.m_c.max(1), ..e.clone() }).collect();
        let floor = ProfileTable { entries: floor };
        let min = floor.entries.iter().map(|e| e.m_c).min().unwrap();
        let tight = auto_plan(&spec, &floor, &model.clone().with_mem_limit(min - 1)).unwrap();
        ensure(tight.plan.is_all_singletons(), || format!("seed {seed}: tight limit merged {:?}", tight.plan.sizes()))?;

        // every constraint slack
        let slack: Vec<ProfileEntry> =
            profile.entries.iter().map(|e| ProfileEntry { t_c: Nanos(u64::MAX / 4), ..e.clone() }).collect();
        let slack = ProfileTable { entries: slack };
        let loose = auto_plan(&spec, &slack, &model.clone().with_mem_limit(u64::MAX)).unwrap();
        ensure(loose.plan.len() == 1, || format!("seed {seed}: slack plan {:?}", loose.plan.sizes()))?;
    }
    Ok(format!("{cases} instances, no violations; boundary plans hold"))
}

fn criterion_5() -> Check {
    let cases = 200;
    let (mut equal, mut unconstrained, mut both, mut gap_total) = (0, 0, 0, Nanos::ZERO);
    for seed in 0..cases {
        let inst = instance(0xc5_0000 + seed, 8);
        let g = greedy_gap(&inst.spec, &inst.profile, &inst.model, SearchBudget::default())
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let (o, a, v) = (g.oracle.report.total_time, g.greedy.total_time, g.vanilla.total_time);
        ensure(o <= a, || format!("seed {seed}: oracle {o} > auto {a}"))?;
        ensure(a <= v, || format!("seed {seed}: auto {a} > vanilla {v}"))?;
        let n = inst.spec.param_count();
        ensure(g.oracle.evaluated == (1u64 << (n - 1)) * 4, || {
            format!("seed {seed}: {} variants", g.oracle.evaluated)
        })?;
        equal += usize::from(o == a);
        unconstrained += usize::from(!g.greedy_binding);
        both += usize::from(o == a && !g.greedy_binding);
        gap_total += g.gap();
    }
    ensure(equal >= unconstrained, || format!("auto = oracle on {equal} < {unconstrained} unconstrained instances"))?;
    Ok(format!(
        "{cases} instances; auto = oracle on {equal}, no binding constraint on {unconstrained} \
         ({both} of those equal); mean gap {}",
        Nanos(gap_total.0 / cases)
    ))
}

/// The hand-traced forward-only timelines: two buckets, gathers of 5 and
/// 8 us, computes of 10 us, free copies.
fn derived_timelines() -> Result<(), String> {
    const US: u64 = 1_000;
    let spec = ModelSpec { name: "t".into(), world_size: 2, modules: vec![] };
    let model = CostModel::new(LinkParams::from_secs(0.0, 1e-9).unwrap(), u64::MAX)
        .with_compute("c1", Nanos(10 * US))
        .with_compute("c2", Nanos(10 * US));
    let f = Phase::Forward;
    let mut g = Graph::new("t", 2, vec![]);
    let ag1 = g.add_node(NodeKind::AllGather { bytes: 5 * US }, f, "b1", vec![]);
    let w1 = g.add_node(NodeKind::AllGatherWait { of: ag1 }, f, "b1", vec![]);
    let c1 = g.add_node(NodeKind::Compute { cost_key: "c1".into() }, f, "b1", vec![]);
    let seq = g.clone();
    let ag2 = g.add_node(NodeKind::AllGather { bytes: 8 * US }, f, "b2", vec![]);
    let w2 = g.add_node(NodeKind::AllGatherWait { of: ag2 }, f, "b2", vec![]);
    let c2 = g.add_node(NodeKind::Compute { cost_key: "c2".into() }, f, "b2", vec![]);
    let mut seq = seq;
    for graph in [&mut seq, &mut g] {
        graph.add_edge(ag1, w1);
        graph.add_edge(w1, c1);
    }
    for (a, b) in [(ag2, w2), (w2, c2), (c1, c2)] {
        g.add_edge(a, b);
    }
    let cases = [
        (&seq, vec![ag1, w1, c1], 15, 5),
        (&g, vec![ag1, ag2, w1, c1, w2, c2], 25, 5),
        (&g, vec![ag1, w1, c1, ag2, w2, c2], 33, 13),
    ];
    for (graph, order, total, exposed) in cases {
        let s = Schedule::new(order);
        let r = simulate(&s, graph, &model, &spec).map_err(|e| e.to_string())?;
        ensure(r.total_time == Nanos(total * US) && r.exposed_comm == Nanos(exposed * US), || {
            format!("expected {total}/{exposed} us, got {}/{}", r.total_time, r.exposed_comm)
        })?;
        retime_events(&r, &s, graph, &model).map_err(|d| d.to_string())?;
    }
    Ok(())
}

fn criterion_6() -> Check {
    derived_timelines()?;
    let mut runs = 0;
    for inst in testkit::tiny_suite() {
        let base = build_fsdp_graph(&inst.spec).unwrap();
        let plans = [None, Some(testkit::random_plan(&mut testkit::rng(inst.seed), &inst.spec))];
        for plan in &plans {
            let g = match plan {
                Some(p) => apply_bucketing(&base, p).unwrap(),
                None => base.clone(),
            };
            let mut schedules = vec![vanilla_schedule(&g).unwrap()];
            schedules.extend(ReorderPolicy::all().map(|p| reorder(&g, p).unwrap()));
            for s in schedules {
                let r = simulate(&s, &g, &inst.model, &inst.spec).map_err(|e| e.to_string())?;
                retime_events(&r, &s, &g, &inst.model).map_err(|d| format!("seed {}: {d}", inst.seed))?;
                ensure(r.final_memory == resident_after_step(&inst.spec), || {
                    format!(
                        "seed {}: final memory {} != {}",
                        inst.seed,
                        r.final_memory,
                        resident_after_step(&inst.spec)
                    )
                })?;
                runs += 1;
            }
        }
    }
    Ok(format!("15/25/33 us timelines exact; {runs} tiny-suite runs retimed with balanced memory"))
}

fn criterion_7() -> Check {
    let cases = 1000;
    for seed in 0..cases {
        let inst = instance(0x77_0000 + seed, 8);
        let base = build_fsdp_graph(&inst.spec).unwrap();
        let plan = testkit::random_plan(&mut testkit::rng(seed), &inst.spec);
        let g = apply_bucketing(&base, &plan).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(g.validate().is_empty(), || format!("seed {seed}: {:?}", g.validate()))?;

        let bytes = |graph: &Graph, phase: Phase, pick: fn(&NodeKind) -> bool| -> u64 {
            graph.nodes().filter(|n| n.phase == phase && pick(&n.kind)).map(|n| n.kind.bytes()).sum()
        };
        let is_ag: fn(&NodeKind) -> bool = |k| matches!(k, NodeKind::AllGather { .. });
        let is_rs: fn(&NodeKind) -> bool = |k| matches!(k, NodeKind::ReduceScatter { .. });
        for phase in [Phase::Forward, Phase::Backward] {
            ensure(bytes(&g, phase, is_ag) == bytes(&base, phase, is_ag), || format!("seed {seed}: AG bytes"))?;
            let ags = g.nodes().filter(|n| n.phase == phase && is_ag(&n.kind)).count();
            ensure(ags == plan.len(), || format!("seed {seed}: {ags} gathers for {} buckets", plan.len()))?;
        }
        ensure(bytes(&g, Phase::Backward, is_rs) == bytes(&base, Phase::Backward, is_rs), || {
            format!("seed {seed}: RS bytes")
        })?;

        let vanilla = vanilla_schedule(&g).unwrap();
        ensure(vanilla.is_linear_extension(&g), || format!("seed {seed}: vanilla order"))?;
        let v = simulate(&vanilla, &g, &inst.model, &inst.spec).unwrap();
        for policy in ReorderPolicy::all() {
            let s = reorder(&g, policy).unwrap();
            ensure(s.is_linear_extension(&g), || format!("seed {seed}: {policy} breaks an edge"))?;
            if policy == ReorderPolicy::default() {
                let r = simulate(&s, &g, &inst.model, &inst.spec).unwrap();
                ensure(r.exposed_comm <= v.exposed_comm, || {
                    format!("seed {seed}: reorder exposes {} > vanilla {}", r.exposed_comm, v.exposed_comm)
                })?;
            }
        }

        // FIFO non-interference: hoisting a forward gather leaves everything
        // issued before it untouched and finishes that gather no later; when
        // the moved staging copies are free, nothing at all is delayed.
        for k in 0..plan.len().saturating_sub(1) {
            let h = hoist_forward_gather(&g, &vanilla, k).unwrap();
            let r = simulate(&h, &g, &inst.model, &inst.spec).unwrap();
            let w = forward_gather_wait(&g, k + 1).unwrap();
            ensure(r.event(w).unwrap().end <= v.event(w).unwrap().end, || format!("seed {seed}: wait {k}"))?;
            let first_moved = h.order().iter().zip(vanilla.order()).position(|(a, b)| a != b).unwrap_or(0);
            for (i, e) in v.events.iter().enumerate() {
                let moved = r.event(e.node).unwrap();
                if i < first_moved {
                    ensure(moved == e, || format!("seed {seed}: hoisting {k} changes {}", e.label))?;
                }
            }
            let moved_cost: Nanos = h.order()[first_moved..]
                .iter()
                .take_while(|&&n| !matches!(g.node(n).kind, NodeKind::AllGather { .. }))
                .map(|&n| inst.model.node_duration(g.node(n)).unwrap())
                .sum();
            if moved_cost == Nanos::ZERO {
                for e in &v.events {
                    let moved = r.event(e.node).unwrap();
                    ensure(moved.end <= e.end, || format!("seed {seed}: hoisting {k} delays {}", e.label))?;
                }
            }
        }
    }
    Ok(format!("{cases} random graphs and plans"))
}

fn criterion_8() -> Check {
    let bin = env!("CARGO_BIN_EXE_fsdpsim");
    let dir = std::env::temp_dir().join(format!("fsdpsim-acceptance-{}", std::process::id()));
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let t = Instant::now();
        let status = Command::new(bin)
            .args(["simulate", "--spec", "llama3-8B", "--cost", "cost-single-node", "--plan", "auto"])
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        ensure(t.elapsed() < Duration::from_secs(60), || format!("run took {:?}", t.elapsed()))?;
        let files: Vec<Vec<u8>> = ["graph.txt", "plan.txt", "report.txt", "trace.json"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap_or_default())
            .collect();
        outputs.push(files);
    }
    let trace: serde_json::Value = serde_json::from_slice(&outputs[0][3]).map_err(|e| e.to_string())?;
    let events = trace["traceEvents"].as_array().ok_or("no traceEvents")?;
    let well_formed = events.iter().all(|e| {
        e["ph"] == "X"
            && e["pid"] == 0
            && (e["tid"] == 0 || e["tid"] == 1)
            && e["ts"].is_number()
            && e["dur"].is_number()
            && e["name"].is_string()
    });
    ensure(!events.is_empty() && well_formed, || "malformed trace".into())?;
    ensure(outputs[0] == outputs[1], || "outputs differ between runs".into())?;
    let _ = fs::remove_dir_all(&dir);
    Ok(format!("{} trace events; outputs byte-identical", events.len()))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Check, u64);
    let criteria: [Criterion; 8] = [
        ("ablation directions, inter-node", criterion_1, 60),
        ("ablation directions, single-node", criterion_2, 60),
        ("prefetch placement directions", criterion_3, 60),
        ("greedy verifier", criterion_4, 120),
        ("oracle dominance", criterion_5, 300),
        ("simulator correctness", criterion_6, 60),
        ("structural properties", criterion_7, 300),
        ("end-to-end determinism", criterion_8, 120),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = check();
        let elapsed = t.elapsed();
        let result = result.and_then(|msg| {
            if elapsed > Duration::from_secs(limit) {
                Err(format!("{msg} (took {elapsed:.1?}, limit {limit} s)"))
            } else {
                Ok(msg)
            }
        });
        match result {
            Ok(msg) => println!("PASS criterion {} ({name}) [{elapsed:.1?}]: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}) [{elapsed:.1?}]: {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
