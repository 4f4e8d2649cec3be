use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rope_core::npe::{FlowModel, FlowSpec};
use rope_core::ot::{sinkhorn_semibalanced, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use rope_core::rope::summary_cost;
use rope_core::tensor::kernels::matmul;
use rope_core::{BoxPrior, TaskId};

fn points(n: usize, seed: u64) -> rope_core::Tensor {
    BoxPrior::new(vec![0.0; 4], vec![1.0; 4]).sample_n(n, seed)
}

fn sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    g.sample_size(10);
    for n in [100, 400] {
        let cost = summary_cost(&points(n, 1), &points(n, 2)).unwrap();
        for tau in [1.0, 0.5] {
            g.bench_with_input(
                BenchmarkId::new(format!("tau{tau}"), n),
                &cost,
                |b, cost| {
                    b.iter(|| {
                        sinkhorn_semibalanced(
                            black_box(cost),
                            0.5,
                            tau,
                            DEFAULT_MAX_ITERS,
                            DEFAULT_TOL,
                        )
                        .unwrap()
                    })
                },
            );
        }
    }
    g.finish();
}

fn flow(c: &mut Criterion) {
    let sim = TaskId::Pendulum.simulator();
    let model = FlowModel::new(FlowSpec::for_simulator(&sim, 5, &[64, 64]), 0);
    let summary = vec![0.1; model.summary_dim()];
    let mut g = c.benchmark_group("flow");
    g.sample_size(10);
    g.bench_function("sample_1000", |b| {
        b.iter(|| model.sample(black_box(&summary), 1000, 7).unwrap())
    });
    let theta = model.sample(&summary, 1000, 7).unwrap();
    let ctx = rope_core::Tensor::matrix(1, summary.len(), summary.clone()).unwrap();
    g.bench_function("log_prob_1000", |b| {
        b.iter(|| model.log_prob(black_box(&theta), &ctx).unwrap())
    });
    g.finish();
}

fn dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = points(n * n / 4, 3).into_data();
        let b = points(n * n / 4, 4).into_data();
        let mut out = vec![0.0; n * n];
        g.bench_function(BenchmarkId::from_parameter(n), |bch| {
            bch.iter(|| matmul(black_box(&a), black_box(&b), &mut out, n, n, n))
        });
    }
    g.finish();
}

criterion_group!(benches, sinkhorn, flow, dense);
criterion_main!(benches);
