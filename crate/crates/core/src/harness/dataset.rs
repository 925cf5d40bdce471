use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::codec;
use crate::error::{Error, Result};
use crate::flow::BatchSource;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class `c` is `N(mu_c, sigma^2 I)`; every entry of `mu_c` is uniform
    /// on `[-1, 1]`, drawn from stream `c` of `mean_seed`.
    SyntheticGaussian {
        classes: usize,
        sigma: f64,
        mean_seed: u64,
        latent: (usize, usize, usize),
    },
    /// A tensor container holding `latents` `(N, h, w, d)` and `labels`
    /// `(N)`.
    LatentFile { path: PathBuf },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::SyntheticGaussian {
                classes,
                sigma,
                latent,
                mean_seed,
            } => {
                if *classes == 0 {
                    return Err(Error::config("classes must be >= 1"));
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
                }
                if latent.0 == 0 || latent.1 == 0 || latent.2 == 0 {
                    return Err(Error::config(format!("latent {latent:?} has a zero dimension")));
                }
                if *mean_seed > i64::MAX as u64 {
                    return Err(Error::config(format!("mean_seed {mean_seed} exceeds {}", i64::MAX)));
                }
                Ok(())
            }
            DatasetSpec::LatentFile { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("path must not be empty"));
                }
                Ok(())
            }
        }
    }

    pub fn latent(&self) -> Option<(usize, usize, usize)> {
        match self {
            DatasetSpec::SyntheticGaussian { latent, .. } => Some(*latent),
            DatasetSpec::LatentFile { .. } => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            DatasetSpec::SyntheticGaussian { classes, .. } => Some(*classes),
            DatasetSpec::LatentFile { .. } => None,
        }
    }
}

/// The per-class Gaussian data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDataset {
    /// `(h, w, d)` mean of every class.
    pub means: Vec<Tensor>,
    pub sigma: f64,
}

impl GaussianDataset {
    pub fn new(classes: usize, sigma: f64, mean_seed: u64, latent: (usize, usize, usize)) -> Self {
        let root = Rng::new(mean_seed);
        let means = (0..classes)
            .map(|c| Tensor::uniform(&[latent.0, latent.1, latent.2], -1.0, 1.0, &mut root.fork(c as u64)))
            .collect();
        Self { means, sigma }
    }

    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::SyntheticGaussian {
                classes,
                sigma,
                mean_seed,
                latent,
            } => Ok(Self::new(*classes, *sigma, *mean_seed, *latent)),
            DatasetSpec::LatentFile { .. } => Err(Error::config(
                "dataset: a latent_file dataset is loaded, not generated",
            )),
        }
    }

    /// `mu_c + sigma * eps` for each label.
    pub fn draw_for(&self, labels: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let shape = self.means.first().map_or(&[0usize, 0, 0][..], Tensor::shape).to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(labels.len() * per);
        for &c in labels {
            let mu = self.means.get(c).ok_or_else(|| Error::Index {
                op: "draw",
                msg: format!("class {c} of {}", self.means.len()),
            })?;
            data.extend(mu.data().iter().map(|&m| m + (self.sigma * rng.normal()) as f32));
        }
        Tensor::from_vec(&[labels.len(), shape[0], shape[1], shape[2]], data)
    }
}

impl BatchSource for GaussianDataset {
    fn draw(&self, batch: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(self.means.len())).collect();
        Ok((self.draw_for(&labels, rng)?, labels))
    }
}

/// `n_per_class` latents of every class, class-major; class `c` draws from
/// stream `c` of `seed`.
pub fn generate_dataset(spec: &DatasetSpec, n_per_class: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let data = GaussianDataset::from_spec(spec)?;
    let root = Rng::new(seed);
    let mut parts = Vec::with_capacity(data.means.len());
    let mut labels = Vec::with_capacity(data.means.len() * n_per_class);
    for c in 0..data.means.len() {
        let l = vec![c; n_per_class];
        parts.push(data.draw_for(&l, &mut root.fork(c as u64))?);
        labels.extend(l);
    }
    Ok((Tensor::stack_rows(&parts)?, labels))
}

/// Precomputed latents sampled with replacement.
#[derive(Clone, Debug)]
pub struct LatentFileDataset {
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl LatentFileDataset {
    pub fn load(path: &std::path::Path, num_classes: usize, latent: (usize, usize, usize)) -> Result<Self> {
        let file = codec::load_tensors(path)?;
        let get = |name: &str| {
            file.get(name)
                .ok_or_else(|| Error::config(format!("dataset.path: {} has no `{name}` tensor", path.display())))
        };
        let latents = get("latents")?.clone();
        let labels_t = get("labels")?;
        let n = labels_t.numel();
        if latents.shape() != [n, latent.0, latent.1, latent.2] {
            return Err(Error::config(format!(
                "dataset.path: latents {:?} do not match {n} labels of shape {latent:?}",
                latents.shape()
            )));
        }
        let labels = labels_t
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && (x as usize) < num_classes {
                    Ok(x as usize)
                } else {
                    Err(Error::config(format!("dataset.path: bad label {x}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.is_empty() {
            return Err(Error::config("dataset.path: no latents"));
        }
        Ok(Self { latents, labels })
    }
}

impl BatchSource for LatentFileDataset {
    fn draw(&self, batch: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        let per = self.latents.numel() / self.labels.len();
        let mut shape = self.latents.shape().to_vec();
        shape[0] = batch;
        let mut data = Vec::with_capacity(batch * per);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.below(self.labels.len());
            data.extend_from_slice(&self.latents.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }
}

/// The training source a spec describes.
pub fn open_source(spec: &DatasetSpec, num_classes: usize, latent: (usize, usize, usize)) -> Result<Box<dyn BatchSource>> {
    Ok(match spec {
        DatasetSpec::SyntheticGaussian { .. } => Box::new(GaussianDataset::from_spec(spec)?),
        DatasetSpec::LatentFile { path } => Box::new(LatentFileDataset::load(path, num_classes, latent)?),
    })
}
