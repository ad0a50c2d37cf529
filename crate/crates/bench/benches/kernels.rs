use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use std::hint::black_box;
use w2rf::locality::{self, Dataset, MinibatchSelection};
use w2rf::ot::{self, EmpiricalMeasure};
use w2rf::rng::{fill_standard_normal, substream, tag};
use w2rf::snn::{self, Mode};
use w2rf::trainer::{self, Objective, RegressionObjective, TrainConfig};

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut data = vec![0.0; n * d];
    fill_standard_normal(&mut substream(seed, &[tag::TEST]), &mut data);
    Array2::from_shape_vec((n, d), data).unwrap()
}

fn bench_w2(c: &mut Criterion) {
    let mut g = c.benchmark_group("squared_w2");
    for &(n, d) in &[(64, 2), (256, 10), (1024, 8)] {
        let a = EmpiricalMeasure::new(gaussian(n, d, 1)).unwrap();
        let b = EmpiricalMeasure::new(gaussian(n, d, 2)).unwrap();
        g.bench_with_input(BenchmarkId::new("lapjv", format!("{n}x{d}")), &(a, b), |bch, (a, b)| {
            bch.iter(|| ot::squared_w2(black_box(a), black_box(b)).unwrap().cost)
        });
    }
    let a = gaussian(4096, 1, 3).into_raw_vec_and_offset().0;
    let b = gaussian(4096, 1, 4).into_raw_vec_and_offset().0;
    g.bench_function("sorted_1d/4096", |bch| bch.iter(|| ot::squared_w2_1d(black_box(&a), black_box(&b)).unwrap()));
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let config = TrainConfig::example1(2, 10);
    let params = trainer::init_params(&config).unwrap();
    let x = [0.1, -0.2];
    let mut r = substream(0, &[tag::EVAL]);
    c.bench_function("snn_forward/example1", |b| {
        b.iter(|| snn::forward(black_box(&params), black_box(&x), &mut r, Mode::Fresh).unwrap())
    });
}

fn bench_local_loss(c: &mut Criterion) {
    let xs = gaussian(2000, 2, 5);
    let truth = gaussian(2000, 10, 6);
    let preds = gaussian(2000, 10, 7);
    let index = locality::build_index(xs.view(), 0.25).unwrap();
    let eligible = locality::eligible(&index, 4);
    let sel = locality::select_minibatch(&eligible, 128, 0.25, 4, 0, &mut substream(0, &[tag::MINIBATCH])).unwrap();
    c.bench_function("local_w2_loss/2000x10", |b| {
        b.iter(|| locality::local_w2_loss(truth.view(), preds.view(), black_box(&sel.indices), &index).unwrap().value)
    });
}

fn bench_epoch(c: &mut Criterion) {
    let data = Dataset::new(gaussian(500, 2, 8), gaussian(500, 10, 9)).unwrap();
    let config = TrainConfig {
        n_batch: 32,
        ..TrainConfig::example1(2, 10)
    };
    let params = trainer::init_params(&config).unwrap();
    let objective = RegressionObjective::new(&data, &config).unwrap();
    let batch = MinibatchSelection {
        indices: objective.eligible()[..32].to_vec(),
        id: 0,
    };
    let mut grad = vec![0.0; params.param_count()];
    c.bench_function("loss_and_grad/example1_batch32", |b| {
        b.iter(|| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            objective.loss_and_grad(&params, &batch, 0, &mut grad).unwrap()
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = bench_w2, bench_forward, bench_local_loss, bench_epoch
}
criterion_main!(kernels);
