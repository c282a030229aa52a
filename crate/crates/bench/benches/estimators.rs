use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use drlogit_bench::{standard_data, with_oracle};
use drlogit_core::efficiency::{ConditionalLaw, PhiOpt};
use drlogit_core::*;

fn root_solver(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_beta");
    for n in [1_000, 10_000] {
        let (data, preds) = with_oracle(n, 5, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_beta(black_box(&data), black_box(&preds), &BracketConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn phi_opt(c: &mut Criterion) {
    let eval = PhiOpt::new(ConditionalLaw::Gaussian { sigma2: 1.0, nodes: 20 }, 0.5).unwrap();
    c.bench_function("phi_opt_gaussian_20_nodes", |b| b.iter(|| eval.eval(black_box(0.3), black_box(-0.2)).unwrap()));
}

fn estimators(c: &mut Criterion) {
    let mut g = c.benchmark_group("estimate");
    g.sample_size(10);

    let data = standard_data(2_000, 5, 2);
    for phi in [PhiKind::None, PhiKind::Opt] {
        let cfg = EstimatorConfig {
            phi,
            ..EstimatorConfig::new(Method::Lowdim)
        };
        g.bench_function(format!("lowdim_n2000_{phi:?}"), |b| b.iter(|| cfg.fit(black_box(&data), 0).unwrap()));
    }

    let wide = standard_data(300, 600, 3);
    let hd = EstimatorConfig::new(Method::HdSparse);
    g.bench_function("hd_sparse_n300_p600", |b| b.iter(|| hd.fit(black_box(&wide), 0).unwrap()));

    let data = standard_data(1_000, 5, 4);
    for learner in ["ridge", "knn", "forest"] {
        let cfg = EstimatorConfig {
            learner: learner.parse().unwrap(),
            ..EstimatorConfig::new(Method::MlCrossfit)
        };
        g.bench_function(format!("ml_{learner}_n1000"), |b| b.iter(|| cfg.fit(black_box(&data), 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, root_solver, phi_opt, estimators);
criterion_main!(benches);
