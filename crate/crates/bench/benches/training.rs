use camcon::autograd::no_grad;
use camcon::trainer::{to_batch, unit_image};
use camcon::{compute_cam, AugmentPolicy, Classifier, LayerId, TrainMode, Trainer, TrainingConfig};
use camcon_bench::{small_split, tiny_model};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward_and_cam(c: &mut Criterion) {
    let split = small_split(16);
    let mut group = c.benchmark_group("tiny");
    for side in [16, 32] {
        let model = tiny_model(side);
        let input = model.config().input_shape;
        let batch = to_batch((0..8).map(|i| unit_image(split.labeled.image(i), input)).collect());
        group.bench_with_input(BenchmarkId::new("forward", side), &batch, |b, x| {
            b.iter(|| no_grad(|| model.forward(x, None)).unwrap())
        });
        for layer in [1, 3] {
            let l = LayerId::new(layer).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("cam_layer{layer}"), side), &batch, |b, x| {
                b.iter(|| compute_cam(&model, x, &[0; 8], l, false).unwrap())
            });
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let split = small_split(16);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in [TrainMode::Baseline, TrainMode::Ablation, TrainMode::Full] {
        let config = TrainingConfig { batch_size: 8, mode, ..Default::default() };
        let policy = AugmentPolicy { image_size: (16, 16), ..Default::default() };
        let mut trainer = Trainer::new(tiny_model(16), &split, config, policy).unwrap();
        let pos: Vec<usize> = (0..8).collect();
        let mut k = 0;
        group.bench_function(format!("{mode:?}").to_lowercase(), |b| {
            b.iter(|| {
                k += 1;
                trainer.step(0, k, &pos, &pos).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_and_cam, train_step);
criterion_main!(benches);
