use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use qdnn_core::model::{backward, build_fcdnn, forward};
use qdnn_core::nn::softmax_cross_entropy;
use qdnn_core::quant::optimal_step_size;
use qdnn_core::rng::{LabRng, Stream};
use qdnn_core::tensor::matmul;
use qdnn_core::{Matrix, ModelConfig};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = LabRng::new(seed, Stream::Misc);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_matrix(128, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn step_size(c: &mut Criterion) {
    let mut group = c.benchmark_group("optimal_step_size");
    let w = random_matrix(128, 128, 3).into_data();
    for bits in [2, 4, 8] {
        group.bench_with_input(BenchmarkId::new("128x128", bits), &bits, |bench, &bits| {
            bench.iter(|| optimal_step_size(black_box(&w), bits).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let net = build_fcdnn(ModelConfig::new(128, 4), 0).unwrap();
    let x = random_matrix(128, 2, 4);
    let labels: Vec<u8> = (0..128).map(|i| (i % 2) as u8).collect();
    c.bench_function("forward_backward_128x4_batch128", |bench| {
        bench.iter(|| {
            let pass = forward(&net, black_box(&x), None).unwrap();
            let (_, dlogits) = softmax_cross_entropy(&pass.logits, &labels).unwrap();
            backward(&net, &pass, &dlogits, None).unwrap()
        })
    });
}

criterion_group!(benches, gemm, step_size, train_step);
criterion_main!(benches);
