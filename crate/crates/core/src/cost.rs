//! Closed-form parameter and multiply-accumulate accounting.
//!
//! One multiply-accumulate counts as one FLOP. Per block with `L` tokens the
//! linear layers cost `(4 + 2r) L D^2` and attention `2 L^2 D`. Norms,
//! softmax, activations and elementwise work are not counted.

use std::fmt::Write as _;

use crate::backbone::{AdalnMode, MpditConfig, TimeEmbed, UpsampleVariant};
use crate::error::{Error, Result};

/// Printed at the top of every text report.
pub const CONVENTION: &str =
    "# GFLOPs = 1e9 multiply-accumulates per forward pass at batch 1 (MAC = 1 FLOP); norms, softmax, activations excluded";

pub const CSV_HEADER: &str = "name,params,gflops,ratio_vs_baseline";

#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub component: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub breakdown: Vec<CostEntry>,
    /// `gflops / baseline gflops`, when a baseline was named.
    pub ratio: Option<f64>,
}

impl CostReport {
    pub fn params_total(&self) -> u64 {
        self.breakdown.iter().map(|e| e.params).sum()
    }

    pub fn macs_total(&self) -> u64 {
        self.breakdown.iter().map(|e| e.macs).sum()
    }

    pub fn gflops_total(&self) -> f64 {
        self.macs_total() as f64 / 1e9
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

fn linear(i: usize, o: usize) -> u64 {
    u(i * o + o)
}

/// Itemized costs of one config.
pub fn breakdown(cfg: &MpditConfig) -> Vec<CostEntry> {
    let d = cfg.width;
    let (h, w, dl) = cfg.latent;
    let m = cfg.class_tokens;
    let r = cfg.mlp_ratio;
    let mut out = Vec::new();
    let mut push = |component: String, params: u64, macs: u64| {
        out.push(CostEntry {
            component,
            params,
            macs,
        })
    };

    push("class_table".into(), u((cfg.num_classes + 1) * m * d), 0);

    let (p, f) = match &cfg.time_embed {
        TimeEmbed::Fno(f) => {
            let (wd, g, bins, md) = (f.width, f.grid_len, f.grid_len / 2 + 1, f.modes);
            let lift = 2 * wd;
            let block = 2 * wd * wd * md + wd * wd + wd;
            // Dense forward and inverse transforms, complex mixing of the kept
            // modes and the pointwise local path; the last block runs on the
            // pooled signal.
            let full = 4 * wd * g * bins + 4 * wd * wd * md + wd * wd * g;
            let macs = wd * g + (f.blocks - 1) * full + 2 * wd * wd + wd * d;
            (u(lift + f.blocks * block) + linear(wd, d), u(macs))
        }
        TimeEmbed::Sinusoidal(s) => {
            let params = linear(s.freq_dim, d) + u(s.n_linear - 1) * linear(d, d);
            let macs = s.freq_dim * d + (s.n_linear - 1) * d * d;
            (params, u(macs))
        }
    };
    push("time_embed".into(), p, f);

    match cfg.adaln {
        AdalnMode::Shared => push("adaln".into(), linear(d, 6 * d), u(6 * d * d)),
        AdalnMode::PerBlock => push(
            "adaln".into(),
            u(cfg.depth()) * linear(d, 6 * d) + linear(d, 2 * d),
            u(cfg.depth() * 6 * d * d + 2 * d * d),
        ),
    }

    for (s, &(p, _)) in cfg.stages.iter().enumerate() {
        let tokens = cfg.image_tokens(s);
        push(format!("patch_embed.{s}"), linear(p * p * dl, d), u(tokens * p * p * dl * d));
    }

    let block_params = u(4 * d) + linear(d, 3 * d) + linear(d, d) + linear(d, r * d) + linear(r * d, d);
    for (s, &(_, n)) in cfg.stages.iter().enumerate() {
        if s > 0 {
            let coarse = cfg.image_tokens(s - 1);
            let fine = cfg.image_tokens(s);
            let expand = (linear(d, 4 * d) + u(2 * d), u(coarse * d * 4 * d));
            let refine = match cfg.upsample {
                UpsampleVariant::Linear => (0, 0),
                UpsampleVariant::LinearLinear => (linear(d, d), u((m + fine) * d * d)),
                UpsampleVariant::LinearMlp { ratio } => (
                    linear(d, ratio * d) + linear(ratio * d, d),
                    u(2 * ratio * (m + fine) * d * d),
                ),
                UpsampleVariant::LinearConv => (linear(d, d), u(fine * d * d)),
            };
            push(format!("upsample.{}", s - 1), expand.0 + refine.0, expand.1 + refine.1);
        }
        let l = u(cfg.seq_len(s));
        let (du, ru) = (u(d), u(r));
        let per_block = (4 + 2 * ru) * l * du * du + 2 * l * l * du;
        push(format!("stage.{s}.blocks"), u(n) * block_params, u(n) * per_block);
    }

    let p = cfg.final_patch();
    let fine = (h / p) * (w / p);
    push("final".into(), u(2 * d) + linear(d, p * p * dl), u(fine * d * p * p * dl));
    out
}

/// Closed-form parameter count; equals the element count of the model's
/// parameter layout.
pub fn count_params(cfg: &MpditConfig) -> u64 {
    breakdown(cfg).iter().map(|e| e.params).sum()
}

pub fn count_gflops(cfg: &MpditConfig) -> f64 {
    breakdown(cfg).iter().map(|e| e.macs).sum::<u64>() as f64 / 1e9
}

/// Reports for `configs` in the given order. `baseline`, when set, must name
/// one of them.
pub fn report(configs: &[(String, MpditConfig)], baseline: Option<&str>) -> Result<Vec<CostReport>> {
    let base = match baseline {
        None => None,
        Some(b) => {
            let (_, cfg) = configs
                .iter()
                .find(|(n, _)| n == b)
                .ok_or_else(|| Error::UnknownBaseline(b.to_string()))?;
            Some(count_gflops(cfg))
        }
    };
    Ok(configs
        .iter()
        .map(|(name, cfg)| {
            let breakdown = breakdown(cfg);
            let macs: u64 = breakdown.iter().map(|e| e.macs).sum();
            CostReport {
                name: name.clone(),
                ratio: base.map(|b| macs as f64 / 1e9 / b),
                breakdown,
            }
        })
        .collect())
}

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let ratio = r.ratio.map_or(String::new(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "{},{},{:.6},{}", r.name, r.params_total(), r.gflops_total(), ratio);
    }
    s
}

pub fn to_text(reports: &[CostReport]) -> String {
    let mut s = format!("{CONVENTION}\n{:<24} {:>14} {:>10} {:>8}\n", "name", "params", "GFLOPs", "ratio");
    for r in reports {
        let ratio = r.ratio.map_or("-".to_string(), |x| format!("{:.1}%", 100.0 * x));
        let _ = writeln!(
            s,
            "{:<24} {:>14} {:>10.2} {:>8}",
            r.name,
            r.params_total(),
            r.gflops_total(),
            ratio
        );
        for e in &r.breakdown {
            let _ = writeln!(s, "  {:<22} {:>14} {:>10.4}", e.component, e.params, e.macs as f64 / 1e9);
        }
    }
    s
}
