//! Seeded random models, cost models, profiles and plans for property
//! tests, the acceptance suite and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{synthesize_profile, CostModel, LinkParams, ProfileEntry, ProfileTable};
use crate::model::{ModelSpec, ModuleSpec, ParameterSpec};
use crate::passes::BucketPlan;
use crate::units::Nanos;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub spec: ModelSpec,
    pub model: CostModel,
    pub profile: ProfileTable,
}

/// A model with at most `max_params` parameters spread over 1..=4 modules
/// (every module holds at least one parameter unless `max_params` is small).
pub fn random_spec(rng: &mut impl Rng, max_params: usize) -> ModelSpec {
    let n_params = rng.gen_range(1..=max_params.max(1));
    let n_modules = rng.gen_range(1..=n_params.min(4));
    let mut counts = vec![1usize; n_modules];
    for _ in n_modules..n_params {
        counts[rng.gen_range(0..n_modules)] += 1;
    }
    let world_size = *[2u32, 4, 8, 8].choose(rng).unwrap();
    let modules = counts
        .iter()
        .enumerate()
        .map(|(m, &k)| ModuleSpec {
            name: format!("blk.{m}"),
            fwd_compute_key: format!("blk{m}.fwd"),
            bwd_compute_key: format!("blk{m}.bwd"),
            activation_bytes: rng.gen_range(0..=1 << 20),
            params: (0..k)
                .map(|j| ParameterSpec {
                    name: format!("blk.{m}.w{j}"),
                    numel: rng.gen_range(1..=1 << 18),
                    elem_bytes: *[1u64, 2, 2, 4].choose(rng).unwrap(),
                    grad_elem_bytes: *[2u64, 4].choose(rng).unwrap(),
                })
                .collect(),
        })
        .collect();
    ModelSpec { name: "rand".into(), world_size, modules }
}

/// Link, copy and compute costs covering every key of `spec`.
pub fn random_cost(rng: &mut impl Rng, spec: &ModelSpec) -> CostModel {
    let alpha = rng.gen_range(0.0..30e-6);
    let beta = rng.gen_range(0.0..2e-10);
    let copy = if rng.gen_bool(0.3) { u64::MAX } else { rng.gen_range(10u64..=1000) * 1_000_000_000 };
    let mut model = CostModel::new(LinkParams::from_secs(alpha, beta).unwrap(), copy);
    for m in &spec.modules {
        let fwd = Nanos(rng.gen_range(1_000..=200_000));
        model = model
            .with_compute(m.fwd_compute_key.clone(), fwd)
            .with_compute(m.bwd_compute_key.clone(), Nanos(fwd.0 * 2))
            .with_peak_mem(m.fwd_compute_key.clone(), rng.gen_range(0..=1 << 22));
    }
    let limit = match rng.gen_range(0..4) {
        0 => u64::MAX,
        1 => 0,
        _ => rng.gen_range(0..=1 << 23),
    };
    model.with_mem_limit(limit)
}

/// Measurements unrelated to the cost model, for exercising the greedy
/// planner on its own.
pub fn random_profile(rng: &mut impl Rng, spec: &ModelSpec) -> ProfileTable {
    let entries = spec
        .params()
        .map(|(_, p)| ProfileEntry {
            param: p.name.clone(),
            t_ag: Nanos(rng.gen_range(0..=100_000)),
            t_rs: Nanos(rng.gen_range(0..=100_000)),
            t_c: Nanos(rng.gen_range(0..=300_000)),
            m_c: rng.gen_range(0..=1 << 22),
        })
        .collect();
    ProfileTable { entries }
}

pub fn random_plan(rng: &mut impl Rng, spec: &ModelSpec) -> BucketPlan {
    let names: Vec<&str> = spec.params().map(|(_, p)| p.name.as_str()).collect();
    let mut buckets: Vec<Vec<String>> = vec![vec![names[0].to_string()]];
    for name in &names[1..] {
        if rng.gen_bool(0.5) {
            buckets.push(Vec::new());
        }
        buckets.last_mut().unwrap().push(name.to_string());
    }
    BucketPlan::new(buckets)
}

/// A random instance whose profile is derived from its cost model.
pub fn instance(seed: u64, max_params: usize) -> Instance {
    let mut r = rng(seed);
    let spec = random_spec(&mut r, max_params);
    let model = random_cost(&mut r, &spec);
    let profile = synthesize_profile(&model, &spec).expect("cost covers spec");
    Instance { seed, spec, model, profile }
}

/// Fixed small instances shared by the timeline checks.
pub fn tiny_suite() -> Vec<Instance> {
    (0..24).map(|s| instance(0x5eed_0000 + s, 6)).collect()
}
