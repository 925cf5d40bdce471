//! Euler integration of the learned velocity field from noise (t = 1) to
//! data (t = 0), with optional classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::backbone::Mpdit;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{parallel, Rng, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_steps: usize,
    /// Guidance scale `w`; 1 disables guidance.
    pub cfg_scale: f64,
    pub use_ema: bool,
    pub seed: u64,
    pub classes: Vec<usize>,
    /// Samples drawn per class by [`sample_grid`].
    pub per_class: usize,
    /// Samples integrated together in one forward batch.
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 250,
            cfg_scale: 1.0,
            use_ema: true,
            seed: 0,
            classes: Vec::new(),
            per_class: 8,
            batch_size: 64,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be >= 1"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// `v_uncond + w (v_cond - v_uncond)`.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let w = T::of(w);
    v_cond.zip_map(v_uncond, |c, u| u + w * (c - u))
}

/// A velocity field `v(x, t, c)` over `(B, h, w, d)` states.
pub trait VelocityField<T: Scalar>: Sync {
    fn velocity(&self, x: &Tensor<T>, t: T, classes: &[usize]) -> Result<Tensor<T>>;

    /// Label of the unconditional branch.
    fn null_class(&self) -> usize;
}

/// A network with a fixed weight snapshot.
pub struct ModelField<'a, T: Scalar = f32> {
    pub model: &'a Mpdit<T>,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&self, x: &Tensor<T>, t: T, classes: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        let b = x.shape().first().copied().unwrap_or(0);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::full(&[b], t));
        let v = self.model.forward(&w, xv, tv, classes)?;
        let out = (*tape.value(v)).clone();
        Ok(out)
    }

    fn null_class(&self) -> usize {
        self.model.config().num_classes
    }
}

/// Guided velocity at one state. `w = 1` evaluates only the conditional
/// branch and `w = 0` only the unconditional one.
pub fn guided_velocity<T: Scalar>(
    field: &dyn VelocityField<T>,
    x: &Tensor<T>,
    t: T,
    classes: &[usize],
    w: f64,
) -> Result<Tensor<T>> {
    if w == 1.0 {
        return field.velocity(x, t, classes);
    }
    let null = vec![field.null_class(); classes.len()];
    if w == 0.0 {
        return field.velocity(x, t, &null);
    }
    let vc = field.velocity(x, t, classes)?;
    let vu = field.velocity(x, t, &null)?;
    cfg_velocity(&vc, &vu, w)
}

/// Integrate from `noise` at t = 1 down to t = 0 with `n_steps` explicit
/// Euler steps: `t_k = 1 - k / n`, `x <- x - v(x, t_k) / n`.
pub fn euler_sample<T: Scalar>(
    field: &dyn VelocityField<T>,
    noise: &Tensor<T>,
    classes: &[usize],
    n_steps: usize,
    w: f64,
) -> Result<Tensor<T>> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    if noise.shape().first() != Some(&classes.len()) {
        return Err(Error::dim(
            "euler_sample",
            format!("noise {:?} for {} labels", noise.shape(), classes.len()),
        ));
    }
    let dt = T::of(1.0 / n_steps as f64);
    let mut x = noise.clone();
    for k in 0..n_steps {
        let t = T::of(1.0 - k as f64 / n_steps as f64);
        let v = guided_velocity(field, &x, t, classes, w).map_err(|e| match e {
            Error::NonFinite { op } => Error::Sampling {
                step: k,
                msg: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        x = x.zip_map(&v, |a, b| a - dt * b)?;
        if !x.is_finite() {
            return Err(Error::Sampling {
                step: k,
                msg: "state became non-finite".into(),
            });
        }
    }
    Ok(x)
}

/// Starting noise of the sample with index `seed`: `(h, w, d)` standard
/// normal from its own stream of `base`.
pub fn seed_noise<T: Scalar>(base: u64, seed: u64, shape: (usize, usize, usize)) -> Tensor<T> {
    let mut rng = Rng::new(base).fork(seed);
    Tensor::randn(&[shape.0, shape.1, shape.2], &mut rng)
}

/// Samples of a class list, `per_class` seeds each.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid<T: Scalar = f32> {
    /// `(class, seed)` of every latent, class-major.
    pub keys: Vec<(usize, u64)>,
    /// `(N, h, w, d)`.
    pub latents: Tensor<T>,
}

/// Draw `per_class` samples for every class of `sc.classes`. Sample
/// `(c, s)` starts from [`seed_noise`]`(sc.seed, s)` and does not depend on
/// which other samples share its batch.
pub fn sample_grid<T: Scalar>(
    field: &dyn VelocityField<T>,
    latent: (usize, usize, usize),
    sc: &SampleConfig,
) -> Result<SampleGrid<T>> {
    sc.validate()?;
    let keys: Vec<(usize, u64)> = sc
        .classes
        .iter()
        .flat_map(|&c| (0..sc.per_class as u64).map(move |s| (c, s)))
        .collect();
    let (h, w, d) = latent;
    if keys.is_empty() {
        return Ok(SampleGrid {
            keys,
            latents: Tensor::zeros(&[0, h, w, d]),
        });
    }
    let chunks: Vec<&[(usize, u64)]> = keys.chunks(sc.batch_size).collect();
    let parts = parallel::map_indexed(chunks.len(), |i| {
        let chunk = chunks[i];
        let noise = chunk
            .iter()
            .map(|&(_, s)| seed_noise(sc.seed, s, latent).reshape(&[1, h, w, d]))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let noise = Tensor::stack_rows(&noise)?;
        let classes: Vec<usize> = chunk.iter().map(|k| k.0).collect();
        euler_sample(field, &noise, &classes, sc.n_steps, sc.cfg_scale)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SampleGrid {
        keys,
        latents: Tensor::stack_rows(&parts)?,
    })
}

/// Exact velocity `E[n - z | z_t = x]` when class `c` data is
/// `N(means[c], sigma^2 I)` and `z_t = (1 - t) z + t n`. The null class
/// uses the equal-weight mixture over all classes.
#[derive(Clone, Debug)]
pub struct GaussianOracle<T: Scalar = f64> {
    pub means: Vec<Tensor<T>>,
    pub sigma: f64,
}

impl<T: Scalar> GaussianOracle<T> {
    /// Per-element velocity for one class at one state element.
    pub fn class_velocity(x: f64, mu: f64, sigma: f64, t: f64) -> f64 {
        let (a, b) = (1.0 - t, t);
        let s2 = a * a * sigma * sigma + b * b;
        (b - a * sigma * sigma) / s2 * (x - a * mu) - mu
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let per = self.means.first().map_or(0, Tensor::numel);
        if self.means.is_empty() || x.rank() == 0 || x.numel() != x.shape()[0] * per {
            return Err(Error::dim(
                "gaussian_oracle",
                format!("state {:?} against {} class means of {per} elements", x.shape(), self.means.len()),
            ));
        }
        Ok(per)
    }
}

impl<T: Scalar> VelocityField<T> for GaussianOracle<T> {
    fn velocity(&self, x: &Tensor<T>, t: T, classes: &[usize]) -> Result<Tensor<T>> {
        let per = self.check(x)?;
        let t = t.as_f64();
        let (a, b) = (1.0 - t, t);
        let s2 = a * a * self.sigma * self.sigma + b * b;
        let mut out = vec![T::zero(); x.numel()];
        for (i, &c) in classes.iter().enumerate() {
            let xs = &x.data()[i * per..(i + 1) * per];
            let o = &mut out[i * per..(i + 1) * per];
            if c < self.means.len() {
                let mu = self.means[c].data();
                for j in 0..per {
                    o[j] = T::of(Self::class_velocity(xs[j].as_f64(), mu[j].as_f64(), self.sigma, t));
                }
            } else if c == self.means.len() {
                // Posterior class weights from the isotropic likelihoods.
                let logp: Vec<f64> = self
                    .means
                    .iter()
                    .map(|m| {
                        -xs.iter()
                            .zip(m.data())
                            .map(|(&xv, &mv)| (xv.as_f64() - a * mv.as_f64()).powi(2))
                            .sum::<f64>()
                            / (2.0 * s2)
                    })
                    .collect();
                let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let wts: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = wts.iter().sum();
                for j in 0..per {
                    let v: f64 = self
                        .means
                        .iter()
                        .zip(&wts)
                        .map(|(m, wt)| wt * Self::class_velocity(xs[j].as_f64(), m.data()[j].as_f64(), self.sigma, t))
                        .sum();
                    o[j] = T::of(v / z);
                }
            } else {
                return Err(Error::Index {
                    op: "gaussian_oracle",
                    msg: format!("class {c} out of 0..={}", self.means.len()),
                });
            }
        }
        Tensor::from_vec(x.shape(), out)
    }

    fn null_class(&self) -> usize {
        self.means.len()
    }
}
