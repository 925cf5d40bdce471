use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mpdit::backbone::{Mpdit, MpditConfig};
use mpdit::flow::{loss_and_grads, sample_fm_batch};
use mpdit::tensor::{parallel, Rng, Tensor};

fn training_step(c: &mut Criterion) {
    let cfg = MpditConfig::preset("tiny").unwrap();
    let model = Mpdit::<f32>::new(cfg.clone()).unwrap();
    let params = model.init_params(&mut Rng::new(0));
    let (h, w, d) = cfg.latent;
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(10);
    for batch in [8, 32] {
        let mut rng = Rng::new(1);
        let z = Tensor::<f32>::randn(&[batch, h, w, d], &mut rng);
        let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
        let fm = sample_fm_batch(&z, &labels, 0.1, cfg.num_classes, &mut rng).unwrap();
        for (mode, deterministic) in [("sequential", true), ("parallel", false)] {
            group.bench_with_input(BenchmarkId::new(mode, batch), &fm, |b, fm| {
                parallel::set_deterministic(deterministic);
                b.iter(|| loss_and_grads(&model, &params, black_box(fm)).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
