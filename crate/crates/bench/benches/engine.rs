use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rashomon_core::data::Split;
use rashomon_core::metrics;
use rashomon_core::tensor::gradcheck;
use rashomon_core::{train, RashomonSlice, Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let a = Tensor::new(&[64, 128], (0..64 * 128).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    let b = Tensor::new(&[128, 128], (0..128 * 128).map(|i| (i % 5) as f64 * 0.1).collect()).unwrap();
    c.bench_function("matmul 64x128x128 forward+backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let x = t.param(a.clone()).unwrap();
            let w = t.param(b.clone()).unwrap();
            let y = t.matmul(x, w).unwrap();
            let l = t.mean(y).unwrap();
            t.backward(l).unwrap();
            black_box(t.grad(w).unwrap().map(|g| g[0]))
        })
    });
}

fn training_step(c: &mut Criterion) {
    let (cfg, d) = rashomon_bench::desk();
    let idx = &d.indices(Split::Train)[..cfg.train.batch_size];
    let batch = d.rows(idx);
    let mut group = c.benchmark_group("loss and grads, desk slice");
    group.sample_size(20);
    for m in [1, 4, 8] {
        let mut mc = cfg.clone();
        mc.model.m = m;
        let slice = RashomonSlice::new(mc.slice_spec(d.input_dim(), d.p(), d.classes()), mc.seed).unwrap();
        let members: Vec<usize> = (0..m).collect();
        for checkpoint in [false, true] {
            let id = BenchmarkId::new(if checkpoint { "checkpointed" } else { "plain" }, m);
            group.bench_with_input(id, &m, |bench, _| {
                bench.iter(|| train::loss_and_grads(&slice, &batch, &members, &mc.train, 0.5, 1, checkpoint).unwrap())
            });
        }
    }
    group.finish();
}

fn metric_kernels(c: &mut Criterion) {
    let z1 = Tensor::new(&[450, 12], (0..450 * 12).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
    let z2 = Tensor::new(&[450, 12], (0..450 * 12).map(|i| ((i * 53) % 97) as f64 / 97.0).collect()).unwrap();
    c.bench_function("linear cka 450x12", |b| b.iter(|| metrics::linear_cka(&z1, &z2).unwrap()));

    let w = Tensor::new(&[8, 10], (0..80).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let x: Vec<f64> = (0..10).map(|j| j as f64 / 10.0).collect();
    let mu = vec![0.5; 10];
    c.bench_function("shap closed form p=10", |b| b.iter(|| metrics::shap_linear(&w, &x, &mu, 3).unwrap()));
    c.bench_function("shap enumeration p=10", |b| {
        b.iter(|| {
            metrics::shapley_enumerate(10, |s| {
                (0..10).map(|j| w.at(3, j) * if s[j] { x[j] } else { mu[j] }).sum()
            })
        })
    });

    let (cfg, d) = rashomon_bench::desk();
    let slice = RashomonSlice::new(cfg.slice_spec(d.input_dim(), d.p(), d.classes()), cfg.seed).unwrap();
    let ws: Vec<Tensor> = (0..4).map(|m| metrics::layer_weight(&slice, m, 1).unwrap()).collect();
    c.bench_function("eigvec similarity, desk layer 1, k=16", |b| {
        b.iter(|| metrics::eigvec_similarity(&ws, 16, 0).unwrap())
    });
}

fn gradient_check(c: &mut Criterion) {
    let g = gradcheck::draw_graph(3).unwrap();
    c.bench_function("finite-difference check of one random graph", |b| {
        b.iter(|| gradcheck::check_graph(&g).unwrap())
    });
}

criterion_group!(benches, matmul, training_step, metric_kernels, gradient_check);
criterion_main!(benches);
