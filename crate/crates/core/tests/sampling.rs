//! Euler sampling against the closed-form Gaussian velocity, guidance
//! identities, and EMA versus raw weights after a short run.

mod common;

use common::gaussian::{class_moments, oracle, oracle_grid, regression_r2, unit_guidance_mismatches, LATENT, SIGMA};
use mpdit::backbone::{Mpdit, MpditConfig};
use mpdit::flow::{train_loop, TrainConfig, TrainState};
use mpdit::harness::GaussianDataset;
use mpdit::sampler::{euler_sample, sample_grid, ModelField, SampleConfig};
use mpdit::tensor::{Rng, Tensor};

/// Before trusting the closed form, check it against a least-squares fit of
/// simulated pairs.
#[test]
fn closed_form_velocity_agrees_with_regression() {
    let r2 = regression_r2(11);
    assert!(r2 > 0.999, "R^2 = {r2}");
}

#[test]
fn unit_guidance_is_conditional_sampling() {
    assert_eq!(unit_guidance_mismatches(4), 0);
}

#[test]
fn euler_under_closed_form_recovers_class_moments() {
    let field = oracle(10);
    let grid = oracle_grid(&field, vec![0, 5], 4096, 250);
    for (c, m) in class_moments(&grid, &field).iter().enumerate() {
        assert!(m.max_mean_err < 0.02, "class {c}: mean error {}", m.max_mean_err);
        assert!(m.max_var_rel_err < 0.10, "class {c}: variance error {}", m.max_var_rel_err);
    }
}

#[test]
fn more_steps_do_not_worsen_the_mean() {
    let field = oracle(10);
    let coarse = class_moments(&oracle_grid(&field, vec![3], 4096, 10), &field);
    let fine = class_moments(&oracle_grid(&field, vec![3], 4096, 250), &field);
    assert!(
        fine[0].mean_abs_mean_err <= coarse[0].mean_abs_mean_err,
        "250 steps {} vs 10 steps {}",
        fine[0].mean_abs_mean_err,
        coarse[0].mean_abs_mean_err
    );
}

#[test]
fn more_steps_shrink_the_variance_error() {
    let field = oracle(10);
    let coarse = class_moments(&oracle_grid(&field, vec![3], 4096, 10), &field);
    let fine = class_moments(&oracle_grid(&field, vec![3], 4096, 250), &field);
    assert!(fine[0].max_var_rel_err < coarse[0].max_var_rel_err);
}

/// Under the linear class velocity an Euler step maps the mean of the state
/// exactly, so with antithetic noise the sample mean is the class mean at
/// any step count.
#[test]
fn antithetic_euler_mean_is_exact() {
    let field = oracle(4);
    let (h, w, d) = LATENT;
    let n = Tensor::<f64>::randn(&[1, h, w, d], &mut Rng::new(5));
    let noise = Tensor::stack_rows(&[n.clone(), n.map(|x| -x)]).unwrap();
    for steps in [1, 10, 250] {
        let x = euler_sample(&field, &noise, &[2, 2], steps, 1.0).unwrap();
        let per = h * w * d;
        for j in 0..per {
            let m = 0.5 * (x.data()[j] + x.data()[per + j]);
            assert!((m - field.means[2].data()[j]).abs() < 1e-12, "{steps} steps");
        }
    }
}

#[test]
fn ema_and_raw_weights_diverge_after_training() {
    let model = Mpdit::new(MpditConfig::preset("tiny").unwrap()).unwrap();
    let data = GaussianDataset::new(10, SIGMA, 7, LATENT);
    let cfg = TrainConfig {
        batch_size: 16,
        total_steps: 100,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, 0);
    train_loop(&mut state, &model, &data, &cfg, 100, |_, _| Ok(())).unwrap();
    let sc = SampleConfig {
        n_steps: 10,
        classes: vec![0, 1],
        per_class: 2,
        ..SampleConfig::default()
    };
    let draw = |params| {
        let field = ModelField { model: &model, params };
        sample_grid(&field, LATENT, &sc).unwrap()
    };
    let ema = draw(&state.ema);
    let raw = draw(&state.params);
    assert_eq!(ema.keys, raw.keys);
    let gap = ema
        .latents
        .data()
        .iter()
        .zip(raw.latents.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(gap > 1e-3, "EMA and raw samples agree to {gap}");
}
