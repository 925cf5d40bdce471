//! Training checkpoints on top of the tensor container.
//!
//! Tables `params/`, `ema/`, `adam_m/` and `adam_v/` hold the four parameter
//! sets. Integers are stored exactly as 16-bit chunks, least significant
//! first: `state/step` (4 chunks) and `state/rng` (seed, stream: 4 each;
//! word position: 8).

use std::path::Path;

use super::codec::{self, TensorFile};
use super::config::RunConfig;
use crate::backbone::Mpdit;
use crate::error::{CodecError, Error, Result};
use crate::flow::TrainState;
use crate::params::ParamSet;
use crate::tensor::{Rng, RngState, Tensor};

const SETS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

fn chunks(x: u128, n: usize) -> Vec<f32> {
    (0..n).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect()
}

fn unchunk(t: &Tensor, name: &str) -> std::result::Result<u128, CodecError> {
    t.data().iter().enumerate().try_fold(0u128, |acc, (i, &c)| {
        if (0.0..65536.0).contains(&c) && c.fract() == 0.0 {
            Ok(acc | ((c as u128) << (16 * i)))
        } else {
            Err(CodecError::Malformed(format!("`{name}` chunk {i} is {c}")))
        }
    })
}

pub fn to_file(run: &RunConfig, state: &TrainState) -> TensorFile {
    let mut file = TensorFile {
        config: run.canonical(),
        tensors: Vec::new(),
    };
    let sets = [&state.params, &state.ema, &state.adam_m, &state.adam_v];
    for (prefix, set) in SETS.iter().zip(sets) {
        for (name, t) in set.iter() {
            file.push(format!("{prefix}/{name}"), t.clone());
        }
    }
    file.push("state/step", Tensor::from_vec(&[4], chunks(state.step as u128, 4)).expect("4 chunks"));
    let r = state.rng.state();
    let mut rng = chunks(r.seed as u128, 4);
    rng.extend(chunks(r.stream as u128, 4));
    rng.extend(chunks(r.word_pos, 8));
    file.push("state/rng", Tensor::from_vec(&[16], rng).expect("16 chunks"));
    file
}

/// The run config stored in a checkpoint.
pub fn stored_config(file: &TensorFile, origin: &Path) -> Result<RunConfig> {
    toml::from_str(&file.config).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        msg: format!("checkpoint config blob: {e}"),
    })
}

/// Rebuild the training state, checking every parameter set against the
/// model's layout.
pub fn from_file(file: &TensorFile, model: &Mpdit) -> Result<TrainState> {
    let layout = model.layout();
    let missing = |name: String| Error::Codec(CodecError::Malformed(format!("missing tensor `{name}`")));
    let mut sets = Vec::with_capacity(4);
    for prefix in SETS {
        let pairs = layout
            .iter()
            .map(|s| {
                let key = format!("{prefix}/{}", s.name);
                file.get(&key).cloned().map(|t| (s.name.clone(), t)).ok_or_else(|| missing(key))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ParamSet::from_pairs(pairs)?;
        set.check_layout(&layout)?;
        sets.push(set);
    }
    let step_t = file.get("state/step").ok_or_else(|| missing("state/step".into()))?;
    let rng_t = file.get("state/rng").ok_or_else(|| missing("state/rng".into()))?;
    if step_t.numel() != 4 || rng_t.numel() != 16 {
        return Err(CodecError::Malformed("state tensors have the wrong length".into()).into());
    }
    let step = unchunk(step_t, "state/step")? as u64;
    let r = rng_t.data();
    let part = |a: usize, b: usize| Tensor::from_vec(&[b - a], r[a..b].to_vec()).expect("slice");
    let rng = Rng::from_state(RngState {
        seed: unchunk(&part(0, 4), "state/rng")? as u64,
        stream: unchunk(&part(4, 8), "state/rng")? as u64,
        word_pos: unchunk(&part(8, 16), "state/rng")?,
    });
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("four sets");
    Ok(TrainState {
        params: next(),
        ema: next(),
        adam_m: next(),
        adam_v: next(),
        step,
        rng,
    })
}

pub fn save(path: &Path, run: &RunConfig, state: &TrainState) -> Result<()> {
    codec::save_tensors(path, &to_file(run, state))
}

/// Load a checkpoint written for `run`'s model. Fails with the list of
/// mismatched fields if the stored config is not resumable as `run`.
pub fn load_for(path: &Path, run: &RunConfig) -> Result<TrainState> {
    let file = codec::load_tensors(path)?;
    let stored = stored_config(&file, path)?;
    let fields = stored.resume_mismatches(run);
    if !fields.is_empty() {
        return Err(Error::ResumeMismatch { fields });
    }
    from_file(&file, &Mpdit::new(run.model.clone())?)
}

/// Load a checkpoint together with its own config.
pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let file = codec::load_tensors(path)?;
    let stored = stored_config(&file, path)?;
    let state = from_file(&file, &Mpdit::new(stored.model.clone())?)?;
    Ok((stored, state))
}
