use covsteer::monte_carlo::McConfig;
use covsteer::scenario::Scenario;
use covsteer::{assemble_blocks, discretize, propagate_nominal, ClarabelAdapter};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linearization(c: &mut Criterion) {
    let s = Scenario::bundled("aerocapture").unwrap();
    let p = &s.problem;
    let tr = propagate_nominal(&s.model, &s.field, &p.x0_mean, &p.initial_controls, &p.partition).unwrap();
    c.bench_function("aerocapture/propagate_nominal", |b| {
        b.iter(|| propagate_nominal(&s.model, &s.field, &p.x0_mean, &p.initial_controls, &p.partition).unwrap())
    });
    c.bench_function("aerocapture/discretize", |b| b.iter(|| discretize(&s.model, &s.field, &tr, 8).unwrap()));
    let ltv = discretize(&s.model, &s.field, &tr, 8).unwrap();
    c.bench_function("aerocapture/assemble_blocks", |b| {
        b.iter(|| assemble_blocks(&ltv, &p.x0_mean, &p.p0).unwrap())
    });
}

fn solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("scp");
    g.sample_size(10);
    for name in ["double_integrator", "aerocapture"] {
        let s = Scenario::bundled(name).unwrap();
        g.bench_function(name, |b| b.iter(|| s.solve(&ClarabelAdapter::default(), Some(1)).unwrap()));
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let s = Scenario::bundled("double_integrator").unwrap();
    let points: Vec<Vec<f64>> = (0..50).map(|i| vec![0.1 + 0.01 * i as f64]).collect();
    c.bench_function("grf/sequential_50_points", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            let mut sampler = s.field.sequential_sampler();
            for p in &points {
                sampler.sample_next(p, &mut rng).unwrap();
            }
        })
    });
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    let s = Scenario::bundled("aerocapture").unwrap();
    let policy = s.open_loop_policy();
    let mc = McConfig {
        trials: 200,
        seed: 1,
        ..McConfig::default()
    };
    g.bench_function("aerocapture_200_trials", |b| b.iter(|| s.simulate(&policy, &mc, "bench").unwrap()));
    g.finish();
}

criterion_group!(benches, linearization, solve, sampling, monte_carlo);
criterion_main!(benches);
