use serde::{Deserialize, Serialize};

use crate::conditioning::{FnoConfig, SinusoidalConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEmbed {
    Fno(FnoConfig),
    Sinusoidal(SinusoidalConfig),
}

impl Default for TimeEmbed {
    fn default() -> Self {
        TimeEmbed::Fno(FnoConfig::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdalnMode {
    /// One `D -> 6D` modulation shared by every block and the final layer.
    #[default]
    Shared,
    /// One `D -> 6D` modulation per block plus a `D -> 2D` one for the final layer.
    PerBlock,
}

/// Token refinement after the upsample expansion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpsampleVariant {
    /// Expansion only.
    Linear,
    /// Expansion, then a `D -> D` linear over all tokens.
    #[default]
    LinearLinear,
    /// Expansion, then a `D -> rD -> D` GELU MLP over all tokens.
    LinearMlp { ratio: usize },
    /// Expansion, then a 1x1 convolution over the fine image-token grid;
    /// class tokens skip the refinement.
    LinearConv,
}

/// Architecture of one network.
///
/// `stages` lists `(patch size, block count)` from coarse to fine. A single
/// stage is a plain DiT; `[(4, N - k), (2, k)]` is the two-level network with
/// `k` fine blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpditConfig {
    pub stages: Vec<(usize, usize)>,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub class_tokens: usize,
    pub num_classes: usize,
    /// `(h, w, d)`.
    pub latent: (usize, usize, usize),
    #[serde(default)]
    pub time_embed: TimeEmbed,
    #[serde(default)]
    pub adaln: AdalnMode,
    #[serde(default)]
    pub upsample: UpsampleVariant,
}

fn default_mlp_ratio() -> usize {
    4
}

/// Names accepted by [`MpditConfig::preset`].
pub const PRESETS: &[&str] = &[
    "tiny",
    "gradcheck",
    "dit_b2",
    "dit_b2_shared",
    "dit_b2_m16",
    "dit_b2_fno",
    "mpdit_b_k4",
    "mpdit_b_k6",
    "mpdit_b_k8",
    "dit_xl2",
    "mpdit_xl_k6",
    "mpdit_xl_512_22_6",
    "mpdit_xl_512_18_6_4",
];

impl MpditConfig {
    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Image tokens at stage `s`.
    pub fn image_tokens(&self, s: usize) -> usize {
        let p = self.stages[s].0;
        (self.latent.0 / p) * (self.latent.1 / p)
    }

    /// Sequence length (class prefix plus image tokens) at stage `s`.
    pub fn seq_len(&self, s: usize) -> usize {
        self.class_tokens + self.image_tokens(s)
    }

    pub fn final_patch(&self) -> usize {
        self.stages.last().map_or(1, |s| s.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.latent;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::config(format!("latent shape {:?} has a zero dimension", self.latent)));
        }
        if self.stages.is_empty() {
            return Err(Error::config("stages must not be empty"));
        }
        for (i, &(p, _)) in self.stages.iter().enumerate() {
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::config(format!(
                    "stage {i}: patch size p={p} must divide latent height h={h} and width w={w}"
                )));
            }
            if i > 0 && self.stages[i - 1].0 != 2 * p {
                return Err(Error::config(format!(
                    "stage {i}: patch sizes must halve from stage to stage, got {} then {p}",
                    self.stages[i - 1].0
                )));
            }
        }
        if self.depth() == 0 {
            return Err(Error::config("total block count must be at least 1"));
        }
        if self.width == 0 || !self.width.is_multiple_of(4) {
            return Err(Error::config(format!("width must be a positive multiple of 4, got {}", self.width)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads={} must divide width={}",
                self.heads, self.width
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be >= 1"));
        }
        if self.class_tokens == 0 {
            return Err(Error::config("class_tokens must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if let UpsampleVariant::LinearMlp { ratio: 0 } = self.upsample {
            return Err(Error::config("upsample mlp ratio must be >= 1"));
        }
        match &self.time_embed {
            TimeEmbed::Fno(f) => f.validate(),
            TimeEmbed::Sinusoidal(s) => s.validate(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        let base_b = |stages: Vec<(usize, usize)>| MpditConfig {
            stages,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            class_tokens: 16,
            num_classes: 1000,
            latent: (32, 32, 4),
            time_embed: TimeEmbed::Fno(FnoConfig::default()),
            adaln: AdalnMode::Shared,
            upsample: UpsampleVariant::LinearLinear,
        };
        let dit_b = || MpditConfig {
            class_tokens: 1,
            time_embed: TimeEmbed::Sinusoidal(SinusoidalConfig::default()),
            adaln: AdalnMode::PerBlock,
            ..base_b(vec![(2, 12)])
        };
        let xl = |stages: Vec<(usize, usize)>, latent: usize| MpditConfig {
            width: 1152,
            heads: 16,
            latent: (latent, latent, 4),
            ..base_b(stages)
        };
        let cfg = match name {
            "tiny" => MpditConfig {
                stages: vec![(4, 4), (2, 2)],
                width: 64,
                heads: 4,
                mlp_ratio: 4,
                class_tokens: 4,
                num_classes: 10,
                latent: (8, 8, 4),
                time_embed: TimeEmbed::Fno(FnoConfig::default()),
                adaln: AdalnMode::Shared,
                upsample: UpsampleVariant::LinearLinear,
            },
            "gradcheck" => MpditConfig {
                stages: vec![(4, 1), (2, 1)],
                width: 16,
                heads: 2,
                mlp_ratio: 4,
                class_tokens: 2,
                num_classes: 3,
                latent: (8, 8, 2),
                time_embed: TimeEmbed::Fno(FnoConfig {
                    width: 16,
                    modes: 8,
                    scaled_init: true,
                    ..FnoConfig::default()
                }),
                adaln: AdalnMode::Shared,
                upsample: UpsampleVariant::LinearLinear,
            },
            "dit_b2" => dit_b(),
            "dit_b2_shared" => MpditConfig {
                adaln: AdalnMode::Shared,
                ..dit_b()
            },
            "dit_b2_m16" => MpditConfig {
                adaln: AdalnMode::Shared,
                class_tokens: 16,
                ..dit_b()
            },
            "dit_b2_fno" => MpditConfig {
                adaln: AdalnMode::Shared,
                class_tokens: 16,
                time_embed: TimeEmbed::Fno(FnoConfig::default()),
                ..dit_b()
            },
            "mpdit_b_k4" => base_b(vec![(4, 8), (2, 4)]),
            "mpdit_b_k6" => base_b(vec![(4, 6), (2, 6)]),
            "mpdit_b_k8" => base_b(vec![(4, 4), (2, 8)]),
            "dit_xl2" => MpditConfig {
                stages: vec![(2, 28)],
                class_tokens: 1,
                time_embed: TimeEmbed::Sinusoidal(SinusoidalConfig::default()),
                adaln: AdalnMode::PerBlock,
                ..xl(vec![], 32)
            },
            "mpdit_xl_k6" => xl(vec![(4, 22), (2, 6)], 32),
            "mpdit_xl_512_22_6" => xl(vec![(4, 22), (2, 6)], 64),
            "mpdit_xl_512_18_6_4" => xl(vec![(8, 18), (4, 6), (2, 4)], 64),
            _ => return None,
        };
        Some(cfg)
    }
}
