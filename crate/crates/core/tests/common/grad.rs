//! Finite-difference checks of single modules, 64-bit.

use mpdit::backbone::{self, chunks, dit_block, upsample_block, Modulation, UpsampleVariant};
use mpdit::conditioning::{fno_layout, fno_time_embed, FnoConfig};
use mpdit::flow::{fm_loss, sample_fm_batch};
use mpdit::params::{Bound, Init, ParamSet, ParamSpec};
use mpdit::tensor::{grad_check, DftMatrices, GradCheckReport, Rng, Tensor, Var};
use mpdit::Result;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub const UPSAMPLE_VARIANTS: [UpsampleVariant; 4] = [
    UpsampleVariant::Linear,
    UpsampleVariant::LinearLinear,
    UpsampleVariant::LinearMlp { ratio: 2 },
    UpsampleVariant::LinearConv,
];

/// Initialize, then jitter every entry so zero-initialized tensors carry
/// gradient signal too.
pub fn random_params(layout: &[ParamSpec], seed: u64, jitter: f64) -> ParamSet<f64> {
    let mut rng = Rng::new(seed);
    let mut p = ParamSet::<f64>::init(layout, &mut rng);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += jitter * rng.normal();
        }
    }
    p
}

/// Gradient check over every parameter of `set` plus `extra` inputs.
pub fn check_with_params<F>(set: &ParamSet<f64>, extra: &[Tensor<f64>], f: F) -> GradCheckReport
where
    F: Fn(&Bound<'_, f64>, &[Var]) -> Result<Var> + Sync,
{
    let n = set.len();
    let mut inputs = set.tensors().to_vec();
    inputs.extend_from_slice(extra);
    grad_check(
        |tape, v| {
            let w = set.bind_vars(tape, &v[..n])?;
            f(&w, &v[n..])
        },
        &inputs,
        H,
    )
    .unwrap()
}

pub fn fno_embed() -> GradCheckReport {
    let cfg = FnoConfig {
        width: 16,
        modes: 8,
        scaled_init: true,
        ..FnoConfig::default()
    };
    let set = random_params(&fno_layout("time", &cfg, 8), 21, 0.1);
    let dft = DftMatrices::<f64>::new(cfg.grid_len).unwrap();
    let t = Tensor::<f64>::from_vec(&[3], vec![0.2, 0.5, 0.9]).unwrap();
    check_with_params(&set, &[t], |w, v| {
        let e = fno_time_embed(w, "time", &cfg, &dft, v[0])?;
        w.tape.sum(e)
    })
}

pub fn dit_block_module() -> GradCheckReport {
    let d = 8;
    let mut layout = backbone::block_layout("blk", d, 2);
    layout.push(ParamSpec::new("ada", &[2, 6 * d], Init::Normal(0.3)));
    let set = random_params(&layout, 31, 0.1);
    let x = Tensor::<f64>::randn(&[2, 5, d], &mut Rng::new(32));
    check_with_params(&set, &[x], |w, v| {
        let m = Modulation::from_chunks(&chunks(w.tape, w.var("ada")?, 6)?);
        let y = dit_block(w, "blk", v[0], &m, 2, None)?;
        let y = w.tape.square(y)?;
        w.tape.sum(y)
    })
}

pub fn upsample(variant: UpsampleVariant) -> GradCheckReport {
    let d = 8;
    let set = random_params(&backbone::upsample_layout("up", d, variant), 41, 0.1);
    let x = Tensor::<f64>::randn(&[2, 3 + 4, d], &mut Rng::new(42));
    check_with_params(&set, &[x], |w, v| {
        let y = upsample_block(w, "up", v[0], 3, variant)?;
        let y = w.tape.square(y)?;
        w.tape.sum(y)
    })
}

/// The loss against a predictor that is an elementwise affine map of the
/// interpolated state, with respect to both coefficients.
pub fn fm_loss_module() -> GradCheckReport {
    let mut rng = Rng::new(61);
    let z = Tensor::<f64>::randn(&[3, 4, 4, 2], &mut rng);
    let batch = sample_fm_batch(&z, &[0, 1, 2], 0.0, 3, &mut rng).unwrap();
    let a = Tensor::<f64>::randn(&[3, 4, 4, 2], &mut rng);
    let b = Tensor::<f64>::randn(&[3, 4, 4, 2], &mut rng);
    grad_check(
        |tape, v| {
            fm_loss(tape, &batch, |zt, _, _| {
                let y = tape.mul(zt, v[0])?;
                tape.add(y, v[1])
            })
        },
        &[a, b],
        H,
    )
    .unwrap()
}
