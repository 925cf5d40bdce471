//! A plain transformer forward written out with loops over tokens, used as
//! the reference for single-stage networks.

use mpdit::backbone::{AdalnMode, Mpdit, MpditConfig, TimeEmbed, UpsampleVariant};
use mpdit::conditioning::SinusoidalConfig;
use mpdit::params::ParamSet;
use mpdit::tensor::{Rng, Tape, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub struct Weights<'a>(&'a ParamSet<f64>);

impl Weights<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
    }

    fn linear(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = self.0.get(&format!("{prefix}.weight")).unwrap();
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), fan_in, "{prefix}");
        let b = self.t(&format!("{prefix}.bias"));
        (0..fan_out)
            .map(|j| b[j] + (0..fan_in).map(|i| x[i] * w.data()[i * fan_out + j]).sum::<f64>())
            .collect()
    }

    fn norm(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let g = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i])
            .collect()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn modulate(x: &[f64], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(shift).zip(scale).map(|((x, s), c)| x * (1.0 + c) + s).collect()
}

/// Row `r`, column `c` of a `rows x cols` token grid at feature `f`.
pub fn position(r: usize, c: usize, f: usize, d: usize) -> f64 {
    let (half, quarter) = (d / 2, d / 4);
    let pos = if f < half { r } else { c } as f64;
    let k = f % half;
    let omega = 10000f64.powf(-((k % quarter) as f64) / quarter as f64);
    if k < quarter {
        (pos * omega).sin()
    } else {
        (pos * omega).cos()
    }
}

pub fn sinusoidal_embed(w: &Weights, cfg: &SinusoidalConfig, t: f64) -> Vec<f64> {
    let half = cfg.freq_dim / 2;
    let mut x: Vec<f64> = (0..half)
        .flat_map(|i| {
            let a = t * (-(10000f64.ln()) * i as f64 / half as f64).exp();
            [a.sin(), a.cos()]
        })
        .collect();
    for i in 0..cfg.n_linear {
        if i > 0 {
            x = x.into_iter().map(silu).collect();
        }
        x = w.linear(&format!("time.mlp.{i}"), &x);
    }
    x
}

pub fn attention(w: &Weights, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let d = x[0].len();
    let hd = d / heads;
    let qkv: Mat = x.iter().map(|row| w.linear(&format!("{prefix}.qkv"), row)).collect();
    let key_bias = &w.t(&format!("{prefix}.qkv.bias"))[d..2 * d];
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, oi) in out.iter_mut().enumerate() {
            let scores: Vec<f64> = qkv
                .iter()
                .map(|kj| {
                    cols.clone()
                        .map(|e| qkv[i][e] * (kj[d + e] - key_bias[e]))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in cols.clone() {
                oi[e] = qkv.iter().zip(&ex).map(|(vj, a)| a / z * vj[2 * d + e]).sum();
            }
        }
    }
    out.iter().map(|o| w.linear(&format!("{prefix}.proj"), o)).collect()
}

/// The velocity of one sample, written as a plain transformer over class
/// tokens followed by `p x p` patches.
pub fn reference(
    w: &Weights,
    cfg: &MpditConfig,
    temb: &[f64],
    z: &[f64],
    class: usize,
) -> Vec<f64> {
    let (h, wd, dl) = cfg.latent;
    let (p, n) = cfg.stages[0];
    let (d, m) = (cfg.width, cfg.class_tokens);
    let (gh, gw) = (h / p, wd / p);
    let cond: Vec<f64> = temb.iter().map(|&v| silu(v)).collect();
    let six = |name: &str, k: usize| -> Vec<Vec<f64>> {
        let y = w.linear(name, &cond);
        (0..k).map(|i| y[i * d..(i + 1) * d].to_vec()).collect()
    };

    let table = w.t("class_table");
    let mut x: Mat = (0..m)
        .map(|j| table[class * m * d + j * d..class * m * d + (j + 1) * d].to_vec())
        .collect();
    for r in 0..gh {
        for c in 0..gw {
            let mut patch = Vec::with_capacity(p * p * dl);
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((r * p + dy) * wd + c * p + dx) * dl;
                    patch.extend_from_slice(&z[base..base + dl]);
                }
            }
            let tok = w.linear("embed.0", &patch);
            x.push(tok.iter().enumerate().map(|(f, v)| v + position(r, c, f, d)).collect());
        }
    }

    let shared = (cfg.adaln == AdalnMode::Shared).then(|| six("adaln", 6));
    for b in 0..n {
        let mo = shared.clone().unwrap_or_else(|| six(&format!("blocks.{b}.adaln"), 6));
        let pre = format!("blocks.{b}");
        let hs: Mat = x
            .iter()
            .map(|row| modulate(&w.norm(&format!("{pre}.norm1"), row), &mo[0], &mo[1]))
            .collect();
        let a = attention(w, &format!("{pre}.attn"), &hs, cfg.heads);
        for (row, ar) in x.iter_mut().zip(&a) {
            for f in 0..d {
                row[f] += mo[2][f] * ar[f];
            }
        }
        for row in x.iter_mut() {
            let hm = modulate(&w.norm(&format!("{pre}.norm2"), row), &mo[3], &mo[4]);
            let u: Vec<f64> = w.linear(&format!("{pre}.mlp.fc1"), &hm).into_iter().map(gelu).collect();
            let v = w.linear(&format!("{pre}.mlp.fc2"), &u);
            for f in 0..d {
                row[f] += mo[5][f] * v[f];
            }
        }
    }

    let (shift, scale) = match &shared {
        Some(mo) => (mo[0].clone(), mo[1].clone()),
        None => {
            let c = six("final.adaln", 2);
            (c[0].clone(), c[1].clone())
        }
    };
    let mut out = vec![0.0; h * wd * dl];
    for (k, row) in x[m..].iter().enumerate() {
        let y = w.linear("final.linear", &modulate(&w.norm("final.norm", row), &shift, &scale));
        let (r, c) = (k / gw, k % gw);
        for dy in 0..p {
            for dx in 0..p {
                for e in 0..dl {
                    out[((r * p + dy) * wd + c * p + dx) * dl + e] = y[(dy * p + dx) * dl + e];
                }
            }
        }
    }
    out
}

pub fn single_stage(adaln: AdalnMode, time_embed: TimeEmbed) -> MpditConfig {
    MpditConfig {
        stages: vec![(2, 2)],
        width: 16,
        heads: 2,
        mlp_ratio: 4,
        class_tokens: 2,
        num_classes: 3,
        latent: (8, 8, 2),
        time_embed,
        adaln,
        upsample: UpsampleVariant::LinearLinear,
    }
}

pub fn jittered(model: &Mpdit<f64>, seed: u64) -> ParamSet<f64> {
    let mut rng = Rng::new(seed);
    let mut set = model.init_params(&mut rng);
    for t in set.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.2 * rng.normal();
        }
    }
    set
}

/// Twenty inputs through both paths. With `own_time` the reference also
/// computes the time embedding; otherwise it reuses the network's.
pub fn max_gap(cfg: MpditConfig, own_time: bool, seed: u64) -> f64 {
    let model = Mpdit::<f64>::new(cfg.clone()).unwrap();
    let params = jittered(&model, seed);
    let w = Weights(&params);
    let (h, wd, dl) = cfg.latent;
    let mut rng = Rng::new(seed + 100);
    let mut gap = 0.0f64;
    for round in 0..10 {
        let z = Tensor::<f64>::randn(&[2, h, wd, dl], &mut rng);
        let t = [rng.uniform(), rng.uniform()];
        let classes = [round % (cfg.num_classes + 1), rng.below(cfg.num_classes + 1)];
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let zv = tape.constant(z.clone());
        let tv = tape.constant(Tensor::from_vec(&[2], t.to_vec()).unwrap());
        let out = tape.value(model.forward(&bound, zv, tv, &classes).unwrap());
        let temb = tape.value(model.time_embed(&bound, tv).unwrap());
        let per = h * wd * dl;
        for i in 0..2 {
            let te = match (&cfg.time_embed, own_time) {
                (TimeEmbed::Sinusoidal(s), true) => sinusoidal_embed(&w, s, t[i]),
                _ => temb.data()[i * cfg.width..(i + 1) * cfg.width].to_vec(),
            };
            let r = reference(&w, &cfg, &te, &z.data()[i * per..(i + 1) * per], classes[i]);
            for (a, b) in r.iter().zip(&out.data()[i * per..(i + 1) * per]) {
                gap = gap.max((a - b).abs());
            }
        }
    }
    gap
}
