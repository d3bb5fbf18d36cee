use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use inner_bench::{random_cohort, relu_model, tied_scores};
use inner_core::metrics::c_statistic;
use inner_core::optim::{self, TrainConfig};
use inner_core::subgroup::fit_lfdr;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradients");
    for &(p, ref hidden) in &[(8usize, vec![64usize, 32]), (16, vec![250, 125])] {
        let model = relu_model(p, hidden, 1);
        let batch = random_cohort(64, p, 2);
        group.throughput(Throughput::Elements(64));
        group.bench_with_input(BenchmarkId::from_parameter(format!("p{p}-{hidden:?}")), &batch, |b, batch| {
            b.iter(|| model.batch_gradients(black_box(batch)).unwrap())
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("c_statistic");
    for n in [1_000, 100_000] {
        let (scores, labels) = tied_scores(n, 3);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| c_statistic(black_box(&scores), black_box(&labels)).unwrap())
        });
    }
    group.finish();
}

fn epoch(c: &mut Criterion) {
    let train = random_cohort(4_000, 8, 4);
    let val = random_cohort(1_000, 8, 5);
    let model = relu_model(8, &[64, 32], 6);
    let cfg = TrainConfig {
        max_epochs: 1,
        gap_delta: f64::INFINITY,
        ..TrainConfig::default()
    };
    c.bench_function("train_one_epoch_n4000", |b| {
        b.iter(|| optim::train(black_box(&model), &train, &val, &cfg).unwrap())
    });
}

fn lfdr(c: &mut Criterion) {
    let (scores, _) = tied_scores(10_000, 7);
    let z: Vec<f64> = scores.iter().map(|s| s + 1e-4 * s * s).collect();
    c.bench_function("fit_lfdr_n10000", |b| b.iter(|| fit_lfdr(black_box(&z)).unwrap()));
}

criterion_group!(benches, forward_backward, auc, epoch, lfdr);
criterion_main!(benches);
