#![allow(dead_code)]

pub mod dit_reference;
pub mod gaussian;
pub mod grad;
pub mod spectral;

use std::path::Path;

use mpdit::backbone::MpditConfig;
use mpdit::flow::TrainConfig;
use mpdit::harness::{DatasetSpec, Paths, RunConfig};
use mpdit::sampler::SampleConfig;

/// A run of `model` on the synthetic Gaussian latents, with every output
/// under `dir`.
pub fn run_in(dir: &Path, model: MpditConfig, steps: u64, batch: usize) -> RunConfig {
    let run = RunConfig {
        name: "test".into(),
        dataset: DatasetSpec::SyntheticGaussian {
            classes: model.num_classes,
            sigma: 0.2,
            mean_seed: 7,
            latent: model.latent,
        },
        model,
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: batch,
            ema_decay: 0.999,
            total_steps: steps,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
        sample: SampleConfig {
            n_steps: 10,
            classes: vec![0, 1],
            per_class: 2,
            ..SampleConfig::default()
        },
        paths: Paths {
            checkpoint_dir: dir.join("ckpt"),
            metrics_file: dir.join("metrics.jsonl"),
            output_dir: dir.join("out"),
            loss_csv: None,
            loss_pgm: None,
            sample_pgm: false,
        },
        analyze: None,
    };
    run.validate().expect("test run is valid");
    run
}

pub fn tiny_run(dir: &Path, steps: u64, batch: usize) -> RunConfig {
    run_in(dir, MpditConfig::preset("tiny").unwrap(), steps, batch)
}

/// Metric records as bit patterns, without the wall-clock column.
pub fn strip_wall(records: &[mpdit::harness::metrics::Record]) -> Vec<(u64, u64, u64)> {
    records
        .iter()
        .map(|r| (r.step, r.loss.to_bits(), r.grad_norm.to_bits()))
        .collect()
}
