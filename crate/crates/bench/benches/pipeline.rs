use criterion::{criterion_group, criterion_main, Criterion};

use mpcx::pipeline::{solve_assembled, LabelSource, PipelineConfig};
use mpcx::problem::assemble_sparse_qp;
use mpcx::{Arch, Head, ScenarioId};
use mpcx_bench::{quick_model, records};

fn pipeline(c: &mut Criterion) {
    let data = records(ScenarioId::DoubleIntegrator, 400, 5);
    let model = quick_model(data.clone(), Arch::Mlp, Head::Constraint, 10);
    let cfg = PipelineConfig::default();
    let rec = &data[0];
    let qp = assemble_sparse_qp(&rec.instance).unwrap();

    let mut group = c.benchmark_group("pipeline");
    group.bench_function("predict_only", |b| b.iter(|| model.predict_label(&rec.instance, cfg.threshold).unwrap()));
    group.bench_function("oracle_labels", |b| {
        let source = LabelSource::Fixed(rec.label.clone());
        b.iter(|| solve_assembled(&rec.instance, &qp, &source, None, &cfg).unwrap())
    });
    group.bench_function("mlp_labels", |b| {
        let source = LabelSource::Model(&model);
        b.iter(|| solve_assembled(&rec.instance, &qp, &source, None, &cfg).unwrap())
    });
    group.bench_function("all_inactive_fallback", |b| {
        let source = LabelSource::AllInactive;
        b.iter(|| solve_assembled(&rec.instance, &qp, &source, None, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
