//! The Gaussian mixture whose velocity is known in closed form, and checks
//! built on it.

use mpdit::backbone::{Mpdit, MpditConfig};
use mpdit::harness::GaussianDataset;
use mpdit::sampler::{sample_grid, seed_noise, GaussianOracle, ModelField, SampleConfig, SampleGrid, VelocityField};
use mpdit::tensor::{Rng, Tensor};
use mpdit::Result;

pub const SIGMA: f64 = 0.2;
pub const LATENT: (usize, usize, usize) = (8, 8, 4);

pub fn oracle(classes: usize) -> GaussianOracle<f64> {
    let data = GaussianDataset::new(classes, SIGMA, 7, LATENT);
    GaussianOracle {
        means: data.means.iter().map(Tensor::cast).collect(),
        sigma: SIGMA,
    }
}

/// Simulate `(z_t, n - z)` pairs on a grid
/// of times and class means, fit the conditional mean by least squares in
/// every cell, and measure how much of the fitted variation the closed form
/// reproduces, as a coefficient of determination.
pub fn regression_r2(seed: u64) -> f64 {
    let times: Vec<f64> = (0..20).map(|i| 0.025 + 0.05 * i as f64).collect();
    let mus = [-0.8, -0.3, 0.1, 0.45, 0.9];
    let per_cell = 1_000_000 / (times.len() * mus.len());
    let mut rng = Rng::new(seed);
    let (mut fit_sq, mut err_sq) = (0.0, 0.0);
    let mut fitted_all = Vec::new();
    for &t in &times {
        for &mu in &mus {
            let pairs: Vec<(f64, f64)> = (0..per_cell)
                .map(|_| {
                    let z = mu + SIGMA * rng.normal();
                    let n = rng.normal();
                    ((1.0 - t) * z + t * n, n - z)
                })
                .collect();
            let k = pairs.len() as f64;
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / k;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / k;
            let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let slope = sxy / sxx;
            let icept = my - slope * mx;
            for &(x, _) in &pairs {
                let fitted = icept + slope * x;
                let closed = GaussianOracle::<f64>::class_velocity(x, mu, SIGMA, t);
                err_sq += (fitted - closed).powi(2);
                fitted_all.push(fitted);
            }
        }
    }
    let mean = fitted_all.iter().sum::<f64>() / fitted_all.len() as f64;
    for f in &fitted_all {
        fit_sq += (f - mean).powi(2);
    }
    1.0 - err_sq / fit_sq
}

pub struct Moments {
    pub max_mean_err: f64,
    pub mean_abs_mean_err: f64,
    pub max_var_rel_err: f64,
}

pub fn class_moments(grid: &SampleGrid<f64>, field: &GaussianOracle<f64>) -> Vec<Moments> {
    let per = LATENT.0 * LATENT.1 * LATENT.2;
    let mut out = Vec::new();
    for (c, mu) in field.means.iter().enumerate() {
        let rows: Vec<&[f64]> = grid
            .keys
            .iter()
            .enumerate()
            .filter(|(_, k)| k.0 == c)
            .map(|(i, _)| &grid.latents.data()[i * per..(i + 1) * per])
            .collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mut m = Moments {
            max_mean_err: 0.0,
            mean_abs_mean_err: 0.0,
            max_var_rel_err: 0.0,
        };
        for j in 0..per {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let e = (mean - mu.data()[j]).abs();
            m.max_mean_err = m.max_mean_err.max(e);
            m.mean_abs_mean_err += e / per as f64;
            m.max_var_rel_err = m.max_var_rel_err.max((var / (SIGMA * SIGMA) - 1.0).abs());
        }
        out.push(m);
    }
    out
}

pub fn oracle_grid(field: &GaussianOracle<f64>, classes: Vec<usize>, per_class: usize, n_steps: usize) -> SampleGrid<f64> {
    let sc = SampleConfig {
        n_steps,
        cfg_scale: 1.0,
        use_ema: true,
        seed: 3,
        classes,
        per_class,
        batch_size: 512,
    };
    sample_grid(field, LATENT, &sc).unwrap()
}

/// Forwards to `inner` but refuses the null class.
pub struct ConditionalOnly<'a>(&'a dyn VelocityField<f32>);

impl VelocityField<f32> for ConditionalOnly<'_> {
    fn velocity(&self, x: &Tensor<f32>, t: f32, classes: &[usize]) -> Result<Tensor<f32>> {
        assert!(classes.iter().all(|&c| c != self.0.null_class()), "null branch evaluated");
        self.0.velocity(x, t, classes)
    }

    fn null_class(&self) -> usize {
        self.0.null_class()
    }
}

pub fn random_network(seed: u64) -> (Mpdit, mpdit::params::ParamSet) {
    let model = Mpdit::new(MpditConfig::preset("tiny").unwrap()).unwrap();
    let mut rng = Rng::new(seed);
    let mut params = model.init_params(&mut rng);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rng.normal() as f32;
        }
    }
    (model, params)
}

/// Samples with guidance scale one and counts those that differ in any bit
/// from a plain Euler loop over the conditional branch.
pub fn unit_guidance_mismatches(seed: u64) -> usize {
    let (model, params) = random_network(seed);
    let field = ModelField {
        model: &model,
        params: &params,
    };
    let sc = SampleConfig {
        n_steps: 8,
        cfg_scale: 1.0,
        use_ema: true,
        seed: 9,
        classes: vec![1, 7],
        per_class: 3,
        batch_size: 6,
    };
    let grid = sample_grid(&field, LATENT, &sc).unwrap();

    // Hand-rolled Euler loop over the conditional branch only.
    let guard = ConditionalOnly(&field);
    let (h, w, d) = LATENT;
    let dt = 1.0f32 / sc.n_steps as f32;
    let mut bad = 0;
    for (i, &(c, s)) in grid.keys.iter().enumerate() {
        let mut x: Tensor<f32> = seed_noise(sc.seed, s, LATENT).reshape(&[1, h, w, d]).unwrap();
        for k in 0..sc.n_steps {
            let t = 1.0 - k as f32 / sc.n_steps as f32;
            let v = guard.velocity(&x, t, &[c]).unwrap();
            x = x.zip_map(&v, |a, b| a - dt * b).unwrap();
        }
        let got = grid.latents.narrow_rows(i, 1).unwrap();
        if !x.data().iter().zip(got.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            bad += 1;
        }
    }
    bad
}
