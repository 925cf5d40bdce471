//! Run configuration, datasets, persistence and the four commands behind the
//! `mpdit` binary.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod metrics;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{AnalyzeSpec, Paths, RunConfig};
pub use dataset::{generate_dataset, DatasetSpec, GaussianDataset};

use crate::backbone::{Mpdit, MpditConfig};
use crate::cost::{self, CostReport};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, sample_fm_batch, train_loop, TrainState};
use crate::params::ParamSet;
use crate::sampler::{sample_grid, ModelField, SampleGrid};
use crate::tensor::{grad_check, GradCheckReport, Rng, Tensor};
use codec::TensorFile;
use metrics::{MetricsWriter, Record};

pub fn checkpoint_path(run: &RunConfig, step: u64) -> PathBuf {
    run.paths.checkpoint_dir.join(format!("step_{step:08}.mpdt"))
}

pub fn latest_checkpoint(run: &RunConfig) -> PathBuf {
    run.paths.checkpoint_dir.join("latest.mpdt")
}

fn save_checkpoint(run: &RunConfig, state: &TrainState) -> Result<()> {
    let file = checkpoint::to_file(run, state);
    let bytes = codec::encode(&file)?;
    codec::write_atomic(&checkpoint_path(run, state.step), &bytes)?;
    codec::write_atomic(&latest_checkpoint(run), &bytes)
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Records written by this invocation.
    pub records: Vec<Record>,
}

/// Train to `run.train.total_steps`, starting fresh or from `resume`.
/// Progress lines go to `log`.
pub fn train(run: &RunConfig, resume: Option<&Path>, log: &mut dyn Write) -> Result<TrainOutcome> {
    run.validate()?;
    let model = Mpdit::new(run.model.clone())?;
    let mut state = match resume {
        Some(p) => checkpoint::load_for(p, run)?,
        None => TrainState::new(&model, run.train.seed),
    };
    let total = run.train.total_steps;
    if state.step > total {
        return Err(Error::config(format!(
            "train.total_steps = {total} is behind the checkpoint step {}",
            state.step
        )));
    }
    let source = dataset::open_source(&run.dataset, run.model.num_classes, run.model.latent)?;
    let mut writer = MetricsWriter::open(&run.paths.metrics_file, resume.map(|_| state.step))?;
    let _ = writeln!(
        log,
        "run {} ({}): {} parameters, steps {}..{total}",
        run.name,
        run.run_id(),
        state.params.numel(),
        state.step
    );
    let start = Instant::now();
    let mut records = Vec::new();
    let cfg = &run.train;
    train_loop(&mut state, &model, source.as_ref(), cfg, total, |st, m| {
        if m.step % cfg.log_every == 0 || m.step == total {
            let r = Record {
                step: m.step,
                loss: m.loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                grad_norm: m.grad_norm,
            };
            writer.write(&r)?;
            let _ = writeln!(log, "step {:>6}  loss {:.5}  grad_norm {:.4}", r.step, r.loss, r.grad_norm);
            records.push(r);
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 && m.step != total {
            save_checkpoint(run, st)?;
        }
        Ok(())
    })?;
    save_checkpoint(run, &state)?;
    if run.paths.loss_csv.is_some() || run.paths.loss_pgm.is_some() {
        let all = metrics::read_records(&run.paths.metrics_file)?;
        if let Some(p) = &run.paths.loss_csv {
            codec::write_atomic(p, metrics::loss_csv(&all).as_bytes())?;
        }
        if let Some(p) = &run.paths.loss_pgm {
            codec::write_atomic(p, &metrics::loss_curve_pgm(&all, 256, 128))?;
        }
    }
    Ok(TrainOutcome { state, records })
}

/// Weights selected by `run.sample.use_ema` from the checkpoint at `ckpt`,
/// whose model must equal `run.model`.
pub fn load_weights(run: &RunConfig, ckpt: &Path) -> Result<ParamSet> {
    let (stored, state) = checkpoint::load(ckpt)?;
    let fields: Vec<String> = stored
        .resume_mismatches(run)
        .into_iter()
        .filter(|f| f.starts_with("model."))
        .collect();
    if !fields.is_empty() {
        return Err(Error::ResumeMismatch { fields });
    }
    Ok(if run.sample.use_ema { state.ema } else { state.params })
}

/// Sample the grid described by `run.sample` and write it under
/// `paths.output_dir`.
pub fn sample(run: &RunConfig, ckpt: &Path) -> Result<SampleGrid> {
    run.validate()?;
    let model = Mpdit::new(run.model.clone())?;
    let params = load_weights(run, ckpt)?;
    let field = ModelField {
        model: &model,
        params: &params,
    };
    let grid = sample_grid(&field, run.model.latent, &run.sample)?;
    let n = grid.keys.len();
    let mut file = TensorFile {
        config: run.canonical(),
        tensors: Vec::new(),
    };
    file.push("latents", grid.latents.clone());
    file.push("classes", Tensor::from_vec(&[n], grid.keys.iter().map(|k| k.0 as f32).collect())?);
    file.push("seeds", Tensor::from_vec(&[n], grid.keys.iter().map(|k| k.1 as f32).collect())?);
    codec::save_tensors(&run.paths.output_dir.join("samples.mpdt"), &file)?;
    if run.paths.sample_pgm && n > 0 {
        let img = metrics::latent_grid_pgm(&grid.latents, run.sample.per_class.max(1), 4)?;
        codec::write_atomic(&run.paths.output_dir.join("samples.pgm"), &img)?;
    }
    Ok(grid)
}

/// Models compared by the cost report of `runs`: each run's `analyze.models`
/// presets, or its own model when it lists none.
pub fn analyze_entries(runs: &[RunConfig]) -> Vec<(String, MpditConfig)> {
    let mut out = Vec::new();
    for run in runs {
        match run.analyze.as_ref().filter(|a| !a.models.is_empty()) {
            Some(a) => out.extend(
                a.models
                    .iter()
                    .map(|m| (m.clone(), MpditConfig::preset(m).expect("validated preset"))),
            ),
            None => out.push((run.name.clone(), run.model.clone())),
        }
    }
    out
}

/// Cost reports of `runs`, baseline from the first run naming one. The CSV
/// goes to the first run's output directory.
pub fn analyze(runs: &[RunConfig]) -> Result<Vec<CostReport>> {
    let baseline = runs.iter().find_map(|r| r.analyze.as_ref().and_then(|a| a.baseline.clone()));
    let reports = cost::report(&analyze_entries(runs), baseline.as_deref())?;
    if let Some(first) = runs.first() {
        codec::write_atomic(&first.paths.output_dir.join("cost.csv"), cost::to_csv(&reports).as_bytes())?;
    }
    Ok(reports)
}

/// Central-difference step of the full-network check.
pub const GRADCHECK_H: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Random offset added to every initialized parameter, so that
/// zero-initialized layers do not hide the paths behind them.
pub const GRADCHECK_JITTER: f64 = 0.25;

/// Finite-difference check of the flow-matching loss with respect to every
/// parameter of `cfg`, in 64-bit.
pub fn full_network_gradcheck(cfg: &MpditConfig, seed: u64, jitter: f64) -> Result<GradCheckReport> {
    let model = Mpdit::<f64>::new(cfg.clone())?;
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::<f64>::init(&model.layout(), &mut rng);
    for t in set.tensors_mut() {
        for x in t.data_mut() {
            *x += jitter * rng.normal();
        }
    }
    let (h, w, d) = cfg.latent;
    let mut rng = Rng::new(seed.wrapping_add(1));
    let z = Tensor::<f64>::randn(&[2, h, w, d], &mut rng);
    let labels = [0, 2.min(cfg.num_classes - 1)];
    let batch = sample_fm_batch(&z, &labels, 0.0, cfg.num_classes, &mut rng)?;
    grad_check(
        |tape, v| {
            let b = set.bind_vars(tape, v)?;
            fm_loss(tape, &batch, |z, t, c| model.forward(&b, z, t, c))
        },
        set.tensors(),
        GRADCHECK_H,
    )
}

/// Run [`full_network_gradcheck`] on `run.model` and fail if it exceeds
/// [`GRADCHECK_TOL`].
pub fn gradcheck(run: &RunConfig) -> Result<GradCheckReport> {
    let r = full_network_gradcheck(&run.model, run.train.seed, GRADCHECK_JITTER)?;
    if r.max_rel_error > GRADCHECK_TOL {
        return Err(Error::CheckFailed(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOL:e} at input {} coordinate {}",
            r.max_rel_error, r.worst.0, r.worst.1
        )));
    }
    Ok(r)
}
