use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use pertvae::baselines::pca_fit;
use pertvae::model::{Model, ModelConfig, Noise};
use pertvae::numerics::linear_sum_assignment;
use pertvae::objective::{loss_and_grad, ContrastMode, LossWeights};
use pertvae::trainer::{adam_step, AdamHyper, AdamState, TrainConfig};
use pertvae::RngStream;
use pertvae_bench::gaussian;

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let x = gaussian(64, cfg.x_dim, 1);
    let xc = gaussian(64, cfg.x_dim, 2);
    let mut u = Array2::zeros((64, cfg.u_dim));
    for r in 0..64 {
        u[[r, r % cfg.u_dim]] = 1.0;
    }
    let mut rng = RngStream::new(3);
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamHyper::from_config(&TrainConfig::default());
    c.bench_function("train_step_batch64_default", |b| {
        b.iter(|| {
            let noise = Noise::sample(64, &cfg, &mut rng);
            let (_, grads) = loss_and_grad(
                &model,
                x.view(),
                xc.view(),
                u.view(),
                &noise,
                LossWeights::default(),
                ContrastMode::Mean,
            )
            .unwrap();
            adam_step(&mut model.params, &grads, &mut adam, hyper).unwrap();
        })
    });
}

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear_sum_assignment");
    for n in [8usize, 32, 128] {
        let cost = gaussian(n, n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| linear_sum_assignment(cost.view(), true).unwrap())
        });
    }
    group.finish();
}

fn pca(c: &mut Criterion) {
    let x = gaussian(1000, 200, 7);
    c.bench_function("pca_fit_1000x200_p11", |b| {
        b.iter(|| pca_fit(x.view(), 11).unwrap())
    });
}

criterion_group!(benches, train_step, assignment, pca);
criterion_main!(benches);
