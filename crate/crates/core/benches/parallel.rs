use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vstab_core::harness::{compare_controllers, Scenario};
use vstab_core::helm::{Continuation, DEFAULT_TERMS};
use vstab_core::stochastic::first_passage_survival;
use vstab_core::{powerflow, Execution, Network};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn first_passage(c: &mut Criterion) {
    let mut g = c.benchmark_group("first_passage_mc");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| first_passage_survival(black_box(0.05), 1e-4, 600.0, 500, 20_000, 1, exec))
        });
    }
    g.finish();
}

fn continuation(c: &mut Criterion) {
    let net = Network::bundled("ieee39").unwrap();
    let base = powerflow::solve_base(&net).unwrap();
    let k = net.loading_direction();
    let mut g = c.benchmark_group("helm_ieee39");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| Continuation::run(&net, &base, &k, DEFAULT_TERMS, exec).unwrap().s_c())
        });
    }
    g.finish();
}

fn comparison(c: &mut Criterion) {
    let mut sc = Scenario::bundled("threebus_reference").unwrap();
    sc.horizon = 200.0;
    sc.seeds = vec![1, 2, 3, 4];
    let mut g = c.benchmark_group("compare_threebus");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compare_controllers(&sc, exec).unwrap().mean_survival())
        });
    }
    g.finish();
}

criterion_group!(benches, first_passage, continuation, comparison);
criterion_main!(benches);
