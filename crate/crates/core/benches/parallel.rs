//! Sequential against rayon execution of the same workloads. Both paths give
//! identical results; only wall time differs.

use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rpt::episodes::{generate_synthetic_volume, FoldSpec, InMemoryPool, PatientData, Setting, SynthParams};
use rpt::eval::{evaluate, EvalConfig};
use rpt::model::{ModelConfig, RptModel};
use rpt::Exec;

fn fixture() -> (InMemoryPool, FoldSpec, RptModel) {
    let mut pool = InMemoryPool::new();
    let mut ids = Vec::new();
    for i in 0..4 {
        let id = format!("b{i}");
        let scan = generate_synthetic_volume(i, &SynthParams::cube(64, 2), &id).unwrap();
        pool.insert(PatientData { scan, pseudo: None });
        ids.push(id);
    }
    let fold = FoldSpec {
        fold_index: 0,
        train_patients: Vec::new(),
        test_patients: ids,
        setting: Setting::One,
        test_classes: BTreeSet::from([1, 2]),
    };
    let model = RptModel::init(
        ModelConfig {
            width: 32,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    (pool, fold, model)
}

fn bench_evaluate(c: &mut Criterion) {
    let (pool, fold, model) = fixture();
    let cfg = EvalConfig {
        image_size: 64,
        ..Default::default()
    };
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &pool, &fold, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate);
criterion_main!(benches);
