//! The multi-patch transformer: class-token prefix, coarse-to-fine stages
//! joined by upsample blocks with patch-embedding skips, and a modulated
//! final layer.

mod blocks;
mod config;

pub use blocks::{
    attention, block_layout, chunks, dit_block, modulate, upsample_block, upsample_block_grid, upsample_layout,
    Modulation, LN_EPS,
};
pub use config::{AdalnMode, MpditConfig, TimeEmbed, UpsampleVariant, PRESETS};

use crate::conditioning::{
    class_tokens, fno_layout, fno_time_embed, patch_embed, patch_embed_layout, sincos_2d, sinusoidal_layout,
    sinusoidal_time_embed,
};
use crate::error::{Error, Result};
use crate::params::{layout_numel, Bound, Init, ParamSet, ParamSpec};
use crate::tensor::{index, DftMatrices, Rng, Scalar, Tensor, Var};

use blocks::{linear, linear_layout, norm, norm_layout};

/// Ordered parameter list of a config. Allocation-free, so usable for
/// shape-only accounting of large configs.
pub fn layout(cfg: &MpditConfig) -> Vec<ParamSpec> {
    let d = cfg.width;
    let (_, _, dl) = cfg.latent;
    let mut out = vec![ParamSpec::new(
        "class_table",
        &[cfg.num_classes + 1, cfg.class_tokens * d],
        Init::Normal(0.02),
    )];
    out.extend(match &cfg.time_embed {
        TimeEmbed::Fno(f) => fno_layout("time", f, d),
        TimeEmbed::Sinusoidal(s) => sinusoidal_layout("time", s, d),
    });
    if cfg.adaln == AdalnMode::Shared {
        linear_layout(&mut out, "adaln", d, 6 * d, Init::Zeros);
    }
    for (s, &(p, _)) in cfg.stages.iter().enumerate() {
        out.extend(patch_embed_layout(&format!("embed.{s}"), p, dl, d));
    }
    let mut block = 0;
    for (s, &(_, n)) in cfg.stages.iter().enumerate() {
        if s > 0 {
            out.extend(upsample_layout(&format!("upsample.{}", s - 1), d, cfg.upsample));
        }
        for _ in 0..n {
            let prefix = format!("blocks.{block}");
            if cfg.adaln == AdalnMode::PerBlock {
                linear_layout(&mut out, &format!("{prefix}.adaln"), d, 6 * d, Init::Zeros);
            }
            out.extend(block_layout(&prefix, d, cfg.mlp_ratio));
            block += 1;
        }
    }
    if cfg.adaln == AdalnMode::PerBlock {
        linear_layout(&mut out, "final.adaln", d, 2 * d, Init::Zeros);
    }
    norm_layout(&mut out, "final.norm", d);
    let p = cfg.final_patch();
    linear_layout(&mut out, "final.linear", d, p * p * dl, Init::Zeros);
    out
}

/// Number of scalar parameters described by [`layout`].
pub fn instantiated_param_count(cfg: &MpditConfig) -> usize {
    layout_numel(&layout(cfg))
}

/// Optional taps into a forward pass.
#[derive(Default)]
pub struct Probes {
    /// Attention weights of every block, in execution order.
    pub attention: Vec<Var>,
}

/// A validated config plus the fixed tables its forward pass needs.
#[derive(Clone, Debug)]
pub struct Mpdit<T: Scalar = f32> {
    cfg: MpditConfig,
    pos: Vec<Tensor<T>>,
    dft: Option<DftMatrices<T>>,
}

impl<T: Scalar> Mpdit<T> {
    pub fn new(cfg: MpditConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w, _) = cfg.latent;
        let pos = cfg
            .stages
            .iter()
            .map(|&(p, _)| sincos_2d(h / p, w / p, cfg.width))
            .collect::<Result<_>>()?;
        let dft = match &cfg.time_embed {
            TimeEmbed::Fno(f) => Some(DftMatrices::new(f.grid_len)?),
            TimeEmbed::Sinusoidal(_) => None,
        };
        Ok(Self { cfg, pos, dft })
    }

    pub fn config(&self) -> &MpditConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        layout(&self.cfg)
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamSet<T> {
        ParamSet::init(&self.layout(), rng)
    }

    /// Positional table of stage `s`.
    pub fn positions(&self, s: usize) -> &Tensor<T> {
        &self.pos[s]
    }

    /// `(B, D)` time embedding.
    pub fn time_embed(&self, w: &Bound<'_, T>, t: Var) -> Result<Var> {
        match (&self.cfg.time_embed, &self.dft) {
            (TimeEmbed::Fno(f), Some(dft)) => fno_time_embed(w, "time", f, dft, t),
            (TimeEmbed::Sinusoidal(s), _) => sinusoidal_time_embed(w, "time", s, t),
            (TimeEmbed::Fno(_), None) => unreachable!("dft tables built with the model"),
        }
    }

    /// Image tokens `(B, L_s, D)` of stage `s`, positions included.
    pub fn embed(&self, w: &Bound<'_, T>, s: usize, z: Var) -> Result<Var> {
        patch_embed(
            w.tape,
            z,
            w.var(&format!("embed.{s}.weight"))?,
            w.var(&format!("embed.{s}.bias"))?,
            &self.pos[s],
            self.cfg.stages[s].0,
        )
    }

    /// Velocity prediction `(B, h, w, d)` for latents `z_t: (B, h, w, d)`,
    /// times `t: (B,)` and class indices (`num_classes` is the null class).
    pub fn forward(&self, w: &Bound<'_, T>, z_t: Var, t: Var, classes: &[usize]) -> Result<Var> {
        self.forward_probed(w, z_t, t, classes, None)
    }

    pub fn forward_probed(
        &self,
        w: &Bound<'_, T>,
        z_t: Var,
        t: Var,
        classes: &[usize],
        mut probes: Option<&mut Probes>,
    ) -> Result<Var> {
        let tape = w.tape;
        let cfg = &self.cfg;
        let (h, wd, dl) = cfg.latent;
        let zs = tape.shape(z_t);
        if zs.len() != 4 || zs[1..] != [h, wd, dl] {
            return Err(Error::dim(
                "forward",
                format!("latent batch {zs:?} does not match configured shape {:?}", cfg.latent),
            ));
        }
        let b = zs[0];
        if tape.shape(t) != [b] || classes.len() != b {
            return Err(Error::dim(
                "forward",
                format!("batch {b} with t {:?} and {} labels", tape.shape(t), classes.len()),
            ));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > cfg.num_classes) {
            return Err(Error::Index {
                op: "class_tokens",
                msg: format!("class {c} out of 0..={} (the last is the null class)", cfg.num_classes),
            });
        }

        let m = cfg.class_tokens;
        let temb = self.time_embed(w, t)?;
        let cond = tape.silu(temb)?;
        let shared = match cfg.adaln {
            AdalnMode::Shared => Some(Modulation::from_chunks(&chunks(tape, linear(w, "adaln", cond)?, 6)?)),
            AdalnMode::PerBlock => None,
        };

        let cls = class_tokens(tape, w.var("class_table")?, classes, m)?;
        let img = self.embed(w, 0, z_t)?;
        let mut x = tape.concat(&[cls, img], 1)?;

        let mut block = 0;
        for (s, &(p, n)) in cfg.stages.iter().enumerate() {
            if s > 0 {
                let coarse = cfg.stages[s - 1].0;
                let grid = (h / coarse, wd / coarse);
                x = upsample_block_grid(w, &format!("upsample.{}", s - 1), x, m, grid, cfg.upsample)?;
                let fine = (h / p) * (wd / p);
                let cls = tape.narrow(x, 1, 0, m)?;
                let img = tape.narrow(x, 1, m, fine)?;
                let skip = self.embed(w, s, z_t)?;
                let img = tape.add(img, skip)?;
                x = tape.concat(&[cls, img], 1)?;
            }
            for _ in 0..n {
                let prefix = format!("blocks.{block}");
                let per_block;
                let modulation = match &shared {
                    Some(mo) => mo,
                    None => {
                        per_block =
                            Modulation::from_chunks(&chunks(tape, linear(w, &format!("{prefix}.adaln"), cond)?, 6)?);
                        &per_block
                    }
                };
                let probs = probes.as_deref_mut().map(|p| &mut p.attention);
                x = dit_block(w, &prefix, x, modulation, cfg.heads, probs)?;
                block += 1;
            }
        }

        let (shift, scale) = match &shared {
            Some(mo) => (mo.shift1, mo.scale1),
            None => {
                let c = chunks(tape, linear(w, "final.adaln", cond)?, 2)?;
                (c[0], c[1])
            }
        };
        let p = cfg.final_patch();
        let fine = (h / p) * (wd / p);
        let img = tape.narrow(x, 1, m, fine)?;
        let img = norm(w, "final.norm", img)?;
        let img = modulate(tape, img, shift, scale)?;
        let out = linear(w, "final.linear", img)?;
        unpatchify(tape, out, p, h, wd)
    }
}

/// `(B, L, p*p*d)` patch rows back to a `(B, h, w, d)` latent.
pub fn unpatchify<T: Scalar>(tape: &crate::tensor::Tape<T>, tokens: Var, p: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens);
    if s.len() != 3 || p == 0 || !s[2].is_multiple_of(p * p) {
        return Err(Error::dim("unpatchify", format!("tokens {s:?} for patch size {p}")));
    }
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) || s[1] != (h / p) * (w / p) {
        return Err(Error::dim(
            "unpatchify",
            format!("{} tokens do not tile a {h}x{w} latent with patch size {p}", s[1]),
        ));
    }
    let d = s[2] / (p * p);
    let (shape, map) = index::unpatchify(s[0], h, w, d, p)?;
    tape.gather(tokens, &shape, map)
}
