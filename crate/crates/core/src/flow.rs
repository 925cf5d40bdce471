//! Flow-matching training: interpolation path, loss, AdamW and EMA.
//!
//! A training batch is a pure function of `(seed, step)`: every step draws
//! from its own forked random stream, so batches can be produced ahead of
//! time on another thread and resumed runs see the same data.

use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::backbone::Mpdit;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{parallel, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TDistribution {
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub label_drop_prob: f64,
    pub t_distribution: TDistribution,
    pub total_steps: u64,
    pub seed: u64,
    /// Emit a metrics record every this many steps.
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Batches prepared ahead by the producer thread.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 128,
            ema_decay: 0.9999,
            label_drop_prob: 0.1,
            t_distribution: TDistribution::Uniform,
            total_steps: 1000,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.label_drop_prob) {
            return Err(Error::config(format!(
                "label_drop_prob must be in [0, 1), got {}",
                self.label_drop_prob
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        Ok(())
    }
}

/// `(1 - t) z + t n` with one `t` per leading-axis sample.
pub fn interpolate<T: Scalar>(z: &Tensor<T>, n: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    if z.shape() != n.shape() {
        return Err(Error::dim(
            "interpolate",
            format!("latent {:?} and noise {:?} differ", z.shape(), n.shape()),
        ));
    }
    let b = *z.shape().first().unwrap_or(&0);
    if t.len() != b {
        return Err(Error::dim("interpolate", format!("{} times for batch {b}", t.len())));
    }
    let per = z.numel().checked_div(b).unwrap_or(0);
    let data = z
        .data()
        .iter()
        .zip(n.data())
        .enumerate()
        .map(|(i, (&zi, &ni))| {
            let ti = t[i / per];
            (T::one() - ti) * zi + ti * ni
        })
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// Fixed inputs of one loss evaluation.
#[derive(Clone, Debug)]
pub struct FmBatch<T: Scalar = f32> {
    pub z_t: Tensor<T>,
    pub t: Tensor<T>,
    pub classes: Vec<usize>,
    /// `n - z`.
    pub target: Tensor<T>,
}

impl<T: Scalar> FmBatch<T> {
    pub fn cast<U: Scalar>(&self) -> FmBatch<U> {
        FmBatch {
            z_t: self.z_t.cast(),
            t: self.t.cast(),
            classes: self.classes.clone(),
            target: self.target.cast(),
        }
    }
}

/// Draw noise, times and label drops for clean latents `z` with `labels`.
/// Dropped labels become `null_class`.
pub fn sample_fm_batch<T: Scalar>(
    z: &Tensor<T>,
    labels: &[usize],
    label_drop_prob: f64,
    null_class: usize,
    rng: &mut Rng,
) -> Result<FmBatch<T>> {
    let b = *z.shape().first().unwrap_or(&0);
    if labels.len() != b {
        return Err(Error::dim("sample_fm_batch", format!("{} labels for batch {b}", labels.len())));
    }
    let n = Tensor::<T>::randn(z.shape(), rng);
    let t: Vec<T> = (0..b).map(|_| T::of(rng.uniform())).collect();
    let classes = labels
        .iter()
        .map(|&c| if rng.bernoulli(label_drop_prob) { null_class } else { c })
        .collect();
    let z_t = interpolate(z, &n, &t)?;
    let target = n.zip_map(z, |a, b| a - b)?;
    Ok(FmBatch {
        z_t,
        t: Tensor::from_vec(&[b], t)?,
        classes,
        target,
    })
}

/// Mean squared error between `velocity(z_t, t, classes)` and the target.
pub fn fm_loss<T: Scalar>(
    tape: &Tape<T>,
    batch: &FmBatch<T>,
    velocity: impl FnOnce(Var, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let z_t = tape.constant(batch.z_t.clone());
    let t = tape.constant(batch.t.clone());
    let v = velocity(z_t, t, &batch.classes)?;
    let target = tape.constant(batch.target.clone());
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Loss of `model` with parameters `params` on `batch`, and its gradients in
/// parameter order.
pub fn loss_and_grads<T: Scalar>(
    model: &Mpdit<T>,
    params: &ParamSet<T>,
    batch: &FmBatch<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let w = params.bind(&tape, true);
    let loss = fm_loss(&tape, batch, |z, t, c| model.forward(&w, z, t, c))?;
    let value = tape.item(loss)?.as_f64();
    let mut g = tape.backward(loss)?;
    let grads = w
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// One bias-corrected update; `step` counts from 1.
    pub fn update(
        &self,
        params: &mut ParamSet,
        grads: &[Tensor],
        m: &mut ParamSet,
        v: &mut ParamSet,
        step: u64,
    ) -> Result<()> {
        if grads.len() != params.len() || !params.same_structure(m) || !params.same_structure(v) {
            return Err(Error::config("optimizer state does not match parameters"));
        }
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr;
        let eps = self.eps;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        for (((p, g), mt), vt) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mt.data_mut())
                .zip(vt.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *x = *x * decay - (lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    if !ema.same_structure(params) {
        return Err(Error::config("EMA and parameter sets differ in structure"));
    }
    let d = T::of(decay);
    let r = T::of(1.0 - decay);
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
            *ei = d * *ei + r * pi;
        }
    }
    Ok(())
}

/// Source of clean training latents.
pub trait BatchSource: Sync {
    /// `(B, h, w, d)` latents and their labels, drawn from `rng`.
    fn draw(&self, batch: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)>;
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    pub step: u64,
    pub rng: Rng,
}

impl TrainState {
    /// Fresh parameters from `seed`; the EMA starts as a copy.
    pub fn new(model: &Mpdit, seed: u64) -> Self {
        let rng = Rng::new(seed);
        let params = model.init_params(&mut rng.fork(u64::MAX));
        Self {
            ema: params.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            step: 0,
            rng,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step number after the update, counting from 1.
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// The batch used at `step` (0-based) of a run.
pub fn batch_for_step(
    source: &dyn BatchSource,
    base: &Rng,
    step: u64,
    cfg: &TrainConfig,
    null_class: usize,
) -> Result<FmBatch> {
    let mut rng = base.fork(step);
    let (z, labels) = source.draw(cfg.batch_size, &mut rng)?;
    sample_fm_batch(&z, &labels, cfg.label_drop_prob, null_class, &mut rng)
}

/// Loss, backward, AdamW, EMA; advances `state.step`.
pub fn train_step(state: &mut TrainState, model: &Mpdit, batch: &FmBatch, cfg: &TrainConfig) -> Result<StepMetrics> {
    let step = state.step + 1;
    let fail = |msg: String| Error::Training { step, msg };
    let (loss, grads) = loss_and_grads(model, &state.params, batch).map_err(|e| match e {
        Error::NonFinite { op } => fail(format!("non-finite value in {op}")),
        other => other,
    })?;
    if !loss.is_finite() {
        return Err(fail(format!("loss is {loss}")));
    }
    let mut sq = 0.0f64;
    for (g, name) in grads.iter().zip(state.params.names()) {
        if !g.is_finite() {
            return Err(fail(format!("non-finite gradient for `{name}`")));
        }
        sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    AdamW::new(cfg.learning_rate).update(&mut state.params, &grads, &mut state.adam_m, &mut state.adam_v, step)?;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay)?;
    state.step = step;
    Ok(StepMetrics {
        step,
        loss,
        grad_norm: sq.sqrt(),
    })
}

/// Train until `state.step == until`, calling `on_step` after every update.
/// Batches are prepared by a producer thread unless deterministic mode is on.
pub fn train_loop(
    state: &mut TrainState,
    model: &Mpdit,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<()> {
    let null = model.config().num_classes;
    let start = state.step;
    if start >= until {
        return Ok(());
    }
    let base = state.rng.clone();
    if !parallel::parallel_enabled() || cfg.prefetch == 0 {
        for s in start..until {
            let batch = batch_for_step(source, &base, s, cfg, null)?;
            let m = train_step(state, model, &batch, cfg)?;
            on_step(state, &m)?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Result<FmBatch>>(cfg.prefetch);
        let producer_base = base.clone();
        scope.spawn(move || {
            for s in start..until {
                let b = batch_for_step(source, &producer_base, s, cfg, null);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for _ in start..until {
            let batch = rx
                .recv()
                .map_err(|_| Error::Training {
                    step: state.step + 1,
                    msg: "batch producer stopped".into(),
                })??;
            let m = train_step(state, model, &batch, cfg)?;
            on_step(state, &m)?;
        }
        Ok(())
    })
}
