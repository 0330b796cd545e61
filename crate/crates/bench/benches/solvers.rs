use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use mpcx::predictor::attention;
use mpcx::problem::{assemble_sparse_qp, reduce_qp};
use mpcx::qpsolve::{solve_full, solve_kkt_equality};
use mpcx::smooth::{lse_combine, lse_combine_parallel};
use mpcx::{ScenarioId, SolverConfig};
use mpcx_bench::records;

fn full_vs_reduced(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("qp");
    for scenario in ScenarioId::ALL {
        let rec = records(scenario, 1, 3).remove(0);
        let qp = assemble_sparse_qp(&rec.instance).unwrap();
        let reduced = reduce_qp(&qp, &rec.label).unwrap();
        group.bench_function(BenchmarkId::new("admm", scenario.as_str()), |b| {
            b.iter(|| solve_full(&qp, None, &cfg).unwrap())
        });
        group.bench_function(BenchmarkId::new("reduced_kkt", scenario.as_str()), |b| {
            b.iter(|| {
                solve_kkt_equality(reduced.cost_matrix, reduced.cost_vector, &reduced.constraint_matrix, &reduced.constraint_rhs)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn attention_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for len in [4usize, 16, 64] {
        let m = DMatrix::from_fn(len, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(len), &m, |b, m| b.iter(|| attention(m, m, m).unwrap()));
    }
    group.finish();
}

fn log_sum_exp(c: &mut Criterion) {
    let values: Vec<f64> = (0..4096).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
    let mut group = c.benchmark_group("lse");
    group.bench_function("serial", |b| b.iter(|| lse_combine(&values, 50.0).unwrap()));
    group.bench_function("tree_2_workers", |b| b.iter(|| lse_combine_parallel(&values, 50.0, 2).unwrap()));
    group.finish();
}

criterion_group!(benches, full_vs_reduced, attention_forward, log_sum_exp);
criterion_main!(benches);
