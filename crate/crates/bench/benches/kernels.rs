use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchtx::autodiff::Graph;
use switchtx::moe::{RouteOptions, SwitchParams};
use switchtx::nn::ParamStore;
use switchtx::Tensor;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [32, 64, 128, 256] {
        let a = random(&mut rng, n, n);
        let b = random(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b).unwrap()));
    }
    group.finish();
}

fn switch_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("switch_layer");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, tokens) = (64, 256);
    let x0 = random(&mut rng, tokens, d);
    for experts in [1, 4, 8] {
        let mut store = ParamStore::new();
        let layer = SwitchParams::new(&mut store, "moe", d, 4 * d, experts, 1.25, 0.01, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", experts), &experts, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::inference();
                let x = g.constant(x0.clone());
                layer.forward(&mut g, &store, x, RouteOptions::default()).unwrap().output
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", experts), &experts, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(x0.clone());
                let out = layer.forward(&mut g, &store, x, RouteOptions { training: true, ..Default::default() }).unwrap();
                let s = g.sum(out.output);
                let loss = g.add(s, out.aux_loss).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, switch_layer);
criterion_main!(benches);
