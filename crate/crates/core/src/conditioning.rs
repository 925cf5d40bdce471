//! Conditioning front-ends: time embeddings, class tokens and patch
//! embedding with fixed 2D sinusoidal positions.
//!
//! Every embedding is described twice: a `layout` listing its parameters
//! under a name prefix, and a forward function that reads those parameters
//! back from a [`Bound`] set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{index, DftMatrices, Scalar, Tape, Tensor, Var};

/// Settings of the spectral time embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnoConfig {
    pub grid_len: usize,
    pub width: usize,
    pub modes: usize,
    pub blocks: usize,
    /// Divide the spectral weights by `in_channels * modes` at init.
    pub scaled_init: bool,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            grid_len: 32,
            width: 32,
            modes: 16,
            blocks: 3,
            scaled_init: false,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_len < 2 {
            return Err(Error::config(format!("fno grid_len must be >= 2, got {}", self.grid_len)));
        }
        check_modes(self.modes, self.grid_len)?;
        if !(2..=4).contains(&self.blocks) {
            return Err(Error::config(format!(
                "fno blocks must be 2, 3 or 4, got {}",
                self.blocks
            )));
        }
        match self.width {
            16 | 32 | 64 => Ok(()),
            128 => Err(Error::config(
                "fno width 128 is rejected: training with this width is unstable; use 16, 32 or 64",
            )),
            w => Err(Error::config(format!("fno width must be 16, 32 or 64, got {w}"))),
        }
    }

    pub fn param_count(&self, d: usize) -> usize {
        let w = self.width;
        2 * w + self.blocks * (2 * w * w * self.modes + w * w + w) + w * d + d
    }
}

fn check_modes(modes: usize, grid_len: usize) -> Result<()> {
    let bins = grid_len / 2 + 1;
    if modes == 0 || modes > bins {
        return Err(Error::config(format!(
            "spectral modes must be in 1..={bins} for grid length {grid_len}, got {modes}"
        )));
    }
    Ok(())
}

/// 1D spectral convolution of `x: (B, W_in, G)` with weights
/// `(W_in, W_out, modes)`, returning `(B, W_out, G)`.
pub fn spectral_conv_1d<T: Scalar>(
    tape: &Tape<T>,
    dft: &DftMatrices<T>,
    x: Var,
    w_real: Var,
    w_imag: Var,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w_real);
    if xs.len() != 3 || ws.len() != 3 || tape.shape(w_imag) != ws || ws[0] != xs[1] {
        return Err(Error::dim(
            "spectral_conv_1d",
            format!(
                "input {xs:?} with weights {ws:?}/{:?}, expected (B, W_in, G) and (W_in, W_out, modes)",
                tape.shape(w_imag)
            ),
        ));
    }
    let (batch, grid) = (xs[0], xs[2]);
    let (w_out, modes) = (ws[1], ws[2]);
    check_modes(modes, grid)?;
    let bins = dft.bins();

    let (xr, xi) = dft.forward(tape, x)?;
    let take = |v: Var| -> Result<Var> {
        let v = tape.narrow(v, 2, 0, modes)?;
        tape.permute(v, &[2, 0, 1])
    };
    let (xr, xi) = (take(xr)?, take(xi)?);
    let wr = tape.permute(w_real, &[2, 0, 1])?;
    let wi = tape.permute(w_imag, &[2, 0, 1])?;

    let rr = tape.matmul(xr, wr)?;
    let ii = tape.matmul(xi, wi)?;
    let ri = tape.matmul(xr, wi)?;
    let ir = tape.matmul(xi, wr)?;
    let real = tape.sub(rr, ii)?;
    let imag = tape.add(ri, ir)?;

    let back = |v: Var| -> Result<Var> {
        let v = tape.permute(v, &[1, 2, 0])?;
        tape.pad(v, 2, bins)
    };
    let out = dft.inverse(tape, back(real)?, back(imag)?)?;
    debug_assert_eq!(tape.shape(out), vec![batch, w_out, grid]);
    Ok(out)
}

pub fn fno_layout(prefix: &str, cfg: &FnoConfig, d: usize) -> Vec<ParamSpec> {
    let w = cfg.width;
    let local = Init::Uniform(1.0 / (w as f64).sqrt());
    let spectral = if cfg.scaled_init {
        Init::Normal(1.0 / (w * cfg.modes) as f64)
    } else {
        Init::Normal(1.0)
    };
    let mut out = vec![
        ParamSpec::new(format!("{prefix}.lift.weight"), &[1, w], Init::Uniform(1.0)),
        ParamSpec::new(format!("{prefix}.lift.bias"), &[w], Init::Uniform(1.0)),
    ];
    for b in 0..cfg.blocks {
        let p = format!("{prefix}.blocks.{b}");
        out.push(ParamSpec::new(format!("{p}.spectral.real"), &[w, w, cfg.modes], spectral));
        out.push(ParamSpec::new(format!("{p}.spectral.imag"), &[w, w, cfg.modes], spectral));
        out.push(ParamSpec::new(format!("{p}.local.weight"), &[w, w], local));
        out.push(ParamSpec::new(format!("{p}.local.bias"), &[w, 1], local));
    }
    out.push(ParamSpec::new(format!("{prefix}.proj.weight"), &[w, d], local));
    out.push(ParamSpec::new(format!("{prefix}.proj.bias"), &[d], local));
    out
}

/// Spectral time embedding of `t: (B,)` to `(B, D)`.
///
/// The input signal is `linspace(-1, 1, G) + t`, lifted pointwise to `width`
/// channels, passed through the mixed spectral/local blocks (GELU after all
/// but the last), mean-pooled over the grid and projected to `D`.
pub fn fno_time_embed<T: Scalar>(
    w: &Bound<'_, T>,
    prefix: &str,
    cfg: &FnoConfig,
    dft: &DftMatrices<T>,
    t: Var,
) -> Result<Var> {
    let tape = w.tape;
    let ts = tape.shape(t);
    if ts.len() != 1 {
        return Err(Error::dim("fno_time_embed", format!("t must be (B,), got {ts:?}")));
    }
    if dft.len() != cfg.grid_len {
        return Err(Error::dim("fno_time_embed", "transform length differs from grid_len"));
    }
    if cfg!(debug_assertions) && tape.value(t).data().iter().any(|&v| v < T::zero() || v > T::one()) {
        eprintln!("warning: fno_time_embed called with t outside [0, 1]");
    }
    let (batch, g) = (ts[0], cfg.grid_len);
    let grid = Tensor::from_fn(&[1, g], |j| T::of(-1.0 + 2.0 * j as f64 / (g - 1) as f64));
    let grid = tape.constant(grid);
    let tcol = tape.reshape(t, &[batch, 1])?;
    let signal = tape.add(tcol, grid)?;
    let signal = tape.reshape(signal, &[batch, g, 1])?;

    let lifted = tape.linear(
        signal,
        w.var(&format!("{prefix}.lift.weight"))?,
        Some(w.var(&format!("{prefix}.lift.bias"))?),
    )?;
    let mut x = tape.permute(lifted, &[0, 2, 1])?;
    for b in 0..cfg.blocks - 1 {
        let p = format!("{prefix}.blocks.{b}");
        let spec = spectral_conv_1d(
            tape,
            dft,
            x,
            w.var(&format!("{p}.spectral.real"))?,
            w.var(&format!("{p}.spectral.imag"))?,
        )?;
        let local = tape.matmul(w.var(&format!("{p}.local.weight"))?, x)?;
        let local = tape.add(local, w.var(&format!("{p}.local.bias"))?)?;
        x = tape.gelu(tape.add(spec, local)?)?;
    }
    // The last block is linear and followed by the grid mean, which keeps
    // only the DC bin of its spectral path: mean(idft(Y)) = Re(Y_0) / G and
    // Re(Y_0) = sum_g(x) . wr[.., 0]. Pool first, then apply both paths.
    let p = format!("{prefix}.blocks.{}", cfg.blocks - 1);
    let width = cfg.width;
    let xm = tape.mean_axis(x, 2)?;
    let wr = tape.narrow(w.var(&format!("{p}.spectral.real"))?, 2, 0, 1)?;
    let wr = tape.reshape(wr, &[width, width])?;
    let spec = tape.matmul(xm, wr)?;
    let lw = tape.transpose(w.var(&format!("{p}.local.weight"))?)?;
    let lb = tape.reshape(w.var(&format!("{p}.local.bias"))?, &[width])?;
    let local = tape.linear(xm, lw, Some(lb))?;
    let pooled = tape.add(spec, local)?;
    tape.linear(
        pooled,
        w.var(&format!("{prefix}.proj.weight"))?,
        Some(w.var(&format!("{prefix}.proj.bias"))?),
    )
}

/// Sinusoidal-feature time embedding followed by a small MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidalConfig {
    pub freq_dim: usize,
    pub n_linear: usize,
}

impl Default for SinusoidalConfig {
    fn default() -> Self {
        Self {
            freq_dim: 256,
            n_linear: 2,
        }
    }
}

impl SinusoidalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_linear) {
            return Err(Error::config(format!(
                "sinusoidal n_linear must be 1, 2 or 3, got {}",
                self.n_linear
            )));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "sinusoidal freq_dim must be even and >= 2, got {}",
                self.freq_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self, d: usize) -> usize {
        self.freq_dim * d + d + (self.n_linear - 1) * (d * d + d)
    }
}

/// `[sin(t f_0), cos(t f_0), sin(t f_1), cos(t f_1), ...]` with
/// `f_i = 10000^(-i / half)`.
pub fn sinusoidal_features<T: Scalar>(t: &[T], freq_dim: usize) -> Tensor<T> {
    let half = freq_dim / 2;
    Tensor::from_fn(&[t.len(), freq_dim], |i| {
        let (b, k) = (i / freq_dim, i % freq_dim);
        let f = (-(10000f64.ln()) * (k / 2) as f64 / half as f64).exp();
        let arg = t[b].as_f64() * f;
        T::of(if k % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

pub fn sinusoidal_layout(prefix: &str, cfg: &SinusoidalConfig, d: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for i in 0..cfg.n_linear {
        let fan_in = if i == 0 { cfg.freq_dim } else { d };
        out.push(ParamSpec::new(format!("{prefix}.mlp.{i}.weight"), &[fan_in, d], Init::Normal(0.02)));
        out.push(ParamSpec::new(format!("{prefix}.mlp.{i}.bias"), &[d], Init::Zeros));
    }
    out
}

/// Sinusoidal time embedding of `t: (B,)` to `(B, D)`. The features are
/// computed from the value of `t`; no gradient flows back into `t`.
pub fn sinusoidal_time_embed<T: Scalar>(
    w: &Bound<'_, T>,
    prefix: &str,
    cfg: &SinusoidalConfig,
    t: Var,
) -> Result<Var> {
    let tape = w.tape;
    let tv = tape.value(t);
    if tv.rank() != 1 {
        return Err(Error::dim("sinusoidal_time_embed", format!("t must be (B,), got {:?}", tv.shape())));
    }
    let mut x = tape.constant(sinusoidal_features(tv.data(), cfg.freq_dim));
    for i in 0..cfg.n_linear {
        if i > 0 {
            x = tape.silu(x)?;
        }
        x = tape.linear(
            x,
            w.var(&format!("{prefix}.mlp.{i}.weight"))?,
            Some(w.var(&format!("{prefix}.mlp.{i}.bias"))?),
        )?;
    }
    Ok(x)
}

/// Class tokens `(B, m, D)` for a batch of class indices; row `C` of the
/// `(C+1, m*D)` table is the null class.
pub fn class_tokens<T: Scalar>(tape: &Tape<T>, table: Var, classes: &[usize], m: usize) -> Result<Var> {
    let shape = tape.shape(table);
    if shape.len() != 2 || m == 0 || !shape[1].is_multiple_of(m) {
        return Err(Error::dim(
            "class_tokens",
            format!("table shape {shape:?} is not (C+1, m*D) for m={m}"),
        ));
    }
    let d = shape[1] / m;
    let rows = tape.index_rows(table, classes)?;
    tape.reshape(rows, &[classes.len(), m, d])
}

/// Fixed 2D sinusoidal table `(rows*cols, D)`: the first `D/2` features
/// encode the row index, the last `D/2` the column index, each as
/// `[sin(pos w_k), cos(pos w_k)]` blocks with `w_k = 10000^(-k / (D/4))`.
pub fn sincos_2d<T: Scalar>(rows: usize, cols: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(4) {
        return Err(Error::config(format!(
            "model width {d} must be divisible by 4 for 2D positional encoding"
        )));
    }
    let quarter = d / 4;
    Ok(Tensor::from_fn(&[rows * cols, d], |i| {
        let (tok, f) = (i / d, i % d);
        let pos = if f < d / 2 { tok / cols } else { tok % cols } as f64;
        let f = f % (d / 2);
        let k = f % quarter;
        let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        T::of(if f < quarter { (pos * omega).sin() } else { (pos * omega).cos() })
    }))
}

pub fn patch_embed_layout(prefix: &str, p: usize, d_latent: usize, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[p * p * d_latent, d], Init::XavierUniform),
        ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros),
    ]
}

/// `(B, h, w, d)` latent to `(B, L, D)` tokens with positions added.
pub fn patch_embed<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    weight: Var,
    bias: Var,
    pos: &Tensor<T>,
    p: usize,
) -> Result<Var> {
    let zs = tape.shape(z);
    if zs.len() != 4 {
        return Err(Error::dim("patch_embed", format!("latent must be (B, h, w, d), got {zs:?}")));
    }
    let (shape, map) = index::patchify(zs[0], zs[1], zs[2], zs[3], p)?;
    if pos.shape() != [shape[1], tape.shape(weight)[1]] {
        return Err(Error::dim(
            "patch_embed",
            format!("positional table {:?} for {} tokens", pos.shape(), shape[1]),
        ));
    }
    let patches = tape.gather(z, &shape, map)?;
    let tokens = tape.linear(patches, weight, Some(bias))?;
    let pos = tape.constant(pos.clone());
    tape.add(tokens, pos)
}
