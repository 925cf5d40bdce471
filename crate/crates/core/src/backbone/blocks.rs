//! Transformer block, upsample block and final layer.

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{index, Scalar, Tape, Tensor, Var};

use super::config::UpsampleVariant;

pub const LN_EPS: f64 = 1e-6;

pub(crate) fn linear_layout(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, init: Init) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], init));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

pub(crate) fn norm_layout(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros));
}

pub(crate) fn linear<T: Scalar>(w: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    w.tape.linear(
        x,
        w.var(&format!("{prefix}.weight"))?,
        Some(w.var(&format!("{prefix}.bias"))?),
    )
}

pub(crate) fn norm<T: Scalar>(w: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    w.tape.layer_norm(
        x,
        Some(w.var(&format!("{prefix}.weight"))?),
        Some(w.var(&format!("{prefix}.bias"))?),
        LN_EPS,
    )
}

/// Shift, scale and gate for both sub-layers of a block, each `(B, 1, D)`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

/// Split the `(B, k*D)` output of a modulation linear into `k` chunks of
/// shape `(B, 1, D)`.
pub fn chunks<T: Scalar>(tape: &Tape<T>, ada: Var, k: usize) -> Result<Vec<Var>> {
    let s = tape.shape(ada);
    if s.len() != 2 || !s[1].is_multiple_of(k) {
        return Err(Error::dim("modulation", format!("cannot split {s:?} into {k} chunks")));
    }
    let d = s[1] / k;
    (0..k)
        .map(|i| {
            let c = tape.narrow(ada, 1, i * d, d)?;
            tape.reshape(c, &[s[0], 1, d])
        })
        .collect()
}

impl Modulation {
    pub fn from_chunks(c: &[Var]) -> Self {
        Self {
            shift1: c[0],
            scale1: c[1],
            gate1: c[2],
            shift2: c[3],
            scale2: c[4],
            gate2: c[5],
        }
    }
}

/// `y * (1 + scale) + shift`.
pub fn modulate<T: Scalar>(tape: &Tape<T>, y: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = tape.affine(scale, 1.0, 1.0)?;
    let y = tape.mul(y, s)?;
    tape.add(y, shift)
}

pub fn block_layout(prefix: &str, d: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    norm_layout(&mut out, &format!("{prefix}.norm1"), d);
    linear_layout(&mut out, &format!("{prefix}.attn.qkv"), d, 3 * d, Init::XavierUniform);
    linear_layout(&mut out, &format!("{prefix}.attn.proj"), d, d, Init::XavierUniform);
    norm_layout(&mut out, &format!("{prefix}.norm2"), d);
    linear_layout(&mut out, &format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, Init::XavierUniform);
    linear_layout(&mut out, &format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, Init::XavierUniform);
    out
}

/// Head-split view of a fused `(B, L, 3D)` qkv tensor: part `which` (0 = q,
/// 1 = k, 2 = v) as `(B, H, L, hd)`, or `(B, H, hd, L)` when `transposed`.
fn split_heads<T: Scalar>(tape: &Tape<T>, qkv: Var, heads: usize, which: usize, transposed: bool) -> Result<Var> {
    let s = tape.shape(qkv);
    let (b, l, d) = (s[0], s[1], s[2] / 3);
    let hd = d / heads;
    let mut map = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for h in 0..heads {
            if transposed {
                for e in 0..hd {
                    for li in 0..l {
                        map.push((bi * l + li) * 3 * d + which * d + h * hd + e);
                    }
                }
            } else {
                for li in 0..l {
                    let base = (bi * l + li) * 3 * d + which * d + h * hd;
                    map.extend(base..base + hd);
                }
            }
        }
    }
    let shape = if transposed { [b, heads, hd, l] } else { [b, heads, l, hd] };
    tape.gather(qkv, &shape, map)
}

/// Multi-head self-attention over the whole sequence. When `probs` is given
/// the `(B, H, L, L)` attention weights are pushed onto it.
pub fn attention<T: Scalar>(
    w: &Bound<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let tape = w.tape;
    let s = tape.shape(x);
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::dim("attention", format!("input {s:?} with {heads} heads")));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let hd = d / heads;
    // A key bias shifts every score of a query row by the same amount, which
    // softmax ignores; it is masked out so that invariance is exact.
    let mask = tape.constant(Tensor::from_fn(&[3 * d], |i| if (d..2 * d).contains(&i) { T::zero() } else { T::one() }));
    let bias = tape.mul(w.var(&format!("{prefix}.qkv.bias"))?, mask)?;
    let qkv = tape.linear(x, w.var(&format!("{prefix}.qkv.weight"))?, Some(bias))?;
    let q = split_heads(tape, qkv, heads, 0, false)?;
    let q = tape.scale(q, 1.0 / (hd as f64).sqrt())?;
    let kt = split_heads(tape, qkv, heads, 1, true)?;
    let v = split_heads(tape, qkv, heads, 2, false)?;
    let scores = tape.matmul(q, kt)?;
    let a = tape.softmax(scores)?;
    if let Some(p) = probs {
        p.push(a);
    }
    let o = tape.matmul(a, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, l, d])?;
    linear(w, &format!("{prefix}.proj"), o)
}

/// One transformer block with adaptive layer-norm modulation:
/// `x += g1 * attn(mod(LN(x)))`, then `x += g2 * mlp(mod(LN(x)))`.
pub fn dit_block<T: Scalar>(
    w: &Bound<'_, T>,
    prefix: &str,
    x: Var,
    m: &Modulation,
    heads: usize,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let tape = w.tape;
    let h = norm(w, &format!("{prefix}.norm1"), x)?;
    let h = modulate(tape, h, m.shift1, m.scale1)?;
    let h = attention(w, &format!("{prefix}.attn"), h, heads, probs)?;
    let h = tape.mul(h, m.gate1)?;
    let x = tape.add(x, h)?;

    let h = norm(w, &format!("{prefix}.norm2"), x)?;
    let h = modulate(tape, h, m.shift2, m.scale2)?;
    let h = linear(w, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(w, &format!("{prefix}.mlp.fc2"), h)?;
    let h = tape.mul(h, m.gate2)?;
    tape.add(x, h)
}

pub fn upsample_layout(prefix: &str, d: usize, variant: UpsampleVariant) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear_layout(&mut out, &format!("{prefix}.expand"), d, 4 * d, Init::XavierUniform);
    norm_layout(&mut out, &format!("{prefix}.norm"), d);
    match variant {
        UpsampleVariant::Linear => {}
        UpsampleVariant::LinearLinear | UpsampleVariant::LinearConv => {
            linear_layout(&mut out, &format!("{prefix}.refine"), d, d, Init::XavierUniform);
        }
        UpsampleVariant::LinearMlp { ratio } => {
            linear_layout(&mut out, &format!("{prefix}.refine.fc1"), d, ratio * d, Init::XavierUniform);
            linear_layout(&mut out, &format!("{prefix}.refine.fc2"), ratio * d, d, Init::XavierUniform);
        }
    }
    out
}

/// Upsample a sequence of `prefix` class tokens followed by a square grid of
/// image tokens to the same class tokens followed by a grid twice as large
/// per side.
pub fn upsample_block<T: Scalar>(
    w: &Bound<'_, T>,
    name: &str,
    x: Var,
    prefix: usize,
    variant: UpsampleVariant,
) -> Result<Var> {
    let s = w.tape.shape(x);
    if s.len() != 3 || s[1] < prefix {
        return Err(Error::dim("upsample_block", format!("input {s:?} with {prefix} class tokens")));
    }
    let n = s[1] - prefix;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::dim(
            "upsample_block",
            format!("image-token count {n} is not a perfect square"),
        ));
    }
    upsample_block_grid(w, name, x, prefix, (side, side), variant)
}

/// [`upsample_block`] for an explicit `(rows, cols)` coarse grid.
pub fn upsample_block_grid<T: Scalar>(
    w: &Bound<'_, T>,
    name: &str,
    x: Var,
    prefix: usize,
    (rows, cols): (usize, usize),
    variant: UpsampleVariant,
) -> Result<Var> {
    let tape = w.tape;
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != prefix + rows * cols {
        return Err(Error::dim(
            "upsample_block",
            format!("input {s:?} is not {prefix} class tokens plus a {rows}x{cols} grid"),
        ));
    }
    let (b, d) = (s[0], s[2]);
    let cls = tape.narrow(x, 1, 0, prefix)?;
    let img = tape.narrow(x, 1, prefix, rows * cols)?;
    let img = linear(w, &format!("{name}.expand"), img)?;
    let (shape, map) = index::pixel_unshuffle(b, rows, cols, d);
    let img = tape.gather(img, &shape, map)?;
    let img = tape.gelu(img)?;
    let y = tape.concat(&[cls, img], 1)?;
    let y = norm(w, &format!("{name}.norm"), y)?;
    match variant {
        UpsampleVariant::Linear => Ok(y),
        UpsampleVariant::LinearLinear => linear(w, &format!("{name}.refine"), y),
        UpsampleVariant::LinearMlp { .. } => {
            let h = linear(w, &format!("{name}.refine.fc1"), y)?;
            let h = tape.gelu(h)?;
            linear(w, &format!("{name}.refine.fc2"), h)
        }
        UpsampleVariant::LinearConv => {
            let fine = 4 * rows * cols;
            let cls = tape.narrow(y, 1, 0, prefix)?;
            let img = tape.narrow(y, 1, prefix, fine)?;
            let img = linear(w, &format!("{name}.refine"), img)?;
            tape.concat(&[cls, img], 1)
        }
    }
}
