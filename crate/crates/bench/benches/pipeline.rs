use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use fsdpsim::cost::synthesize_profile;
use fsdpsim::oracle::{best_plan_exhaustive, SearchBudget};
use fsdpsim::testkit::instance;
use fsdpsim::{apply_bucketing, auto_plan, build_fsdp_graph, reorder, simulate, ReorderPolicy};
use fsdpsim_bench::llama3_8b;

fn llama(c: &mut Criterion) {
    let f = llama3_8b();
    let bucketed = apply_bucketing(&f.graph, &f.blocks).unwrap();
    let schedule = reorder(&bucketed, ReorderPolicy::default()).unwrap();
    let profile = synthesize_profile(&f.model, &f.spec).unwrap();

    let mut g = c.benchmark_group("llama3-8B");
    g.bench_function("build_graph", |b| b.iter(|| build_fsdp_graph(black_box(&f.spec)).unwrap()));
    g.bench_function("bucket_blocks", |b| b.iter(|| apply_bucketing(black_box(&f.graph), &f.blocks).unwrap()));
    g.bench_function("reorder", |b| b.iter(|| reorder(black_box(&bucketed), ReorderPolicy::default()).unwrap()));
    g.bench_function("simulate", |b| b.iter(|| simulate(black_box(&schedule), &bucketed, &f.model, &f.spec).unwrap()));
    g.bench_function("auto_plan", |b| b.iter(|| auto_plan(black_box(&f.spec), &profile, &f.model).unwrap()));
    g.finish();
}

fn oracle(c: &mut Criterion) {
    let inst = (0..).map(|s| instance(s, 6)).find(|i| i.spec.param_count() == 6).unwrap();
    c.bench_function("oracle/6_params", |b| {
        b.iter(|| {
            best_plan_exhaustive(black_box(&inst.spec), &inst.profile, &inst.model, SearchBudget::default()).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = llama, oracle
}
criterion_main!(benches);
