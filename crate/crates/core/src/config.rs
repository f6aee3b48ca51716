//! Run configuration shared by every command, and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mq_distill::InferenceMode;
use crate::scenegen::{Degradation, GenParams, RasterConfig, SplitStrategy};
use crate::ua_decoder::AttentionMode;
use crate::ui2dprompt::{OmegaScope, DEFAULT_SCORE_THRESHOLD};

/// Independent switches for the ablation rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub ua_attention: bool,
    pub ua_head: bool,
    pub ui2dprompt: bool,
    pub p2bev: bool,
    pub p2q: bool,
    pub mimic: bool,
    /// Start the BEV input projection from the pretrained image-branch one.
    pub pretrained_pv_backbone_share: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self::full()
    }
}

impl Flags {
    pub const NAMES: [&'static str; 7] = ["ua_attention", "ua_head", "ui2dprompt", "p2bev", "p2q", "mimic", "pretrained_pv_backbone_share"];

    pub fn full() -> Self {
        Self {
            ua_attention: true,
            ua_head: true,
            ui2dprompt: true,
            p2bev: true,
            p2q: true,
            mimic: true,
            pretrained_pv_backbone_share: false,
        }
    }

    pub fn baseline() -> Self {
        Self {
            ua_attention: false,
            ua_head: false,
            ui2dprompt: false,
            p2bev: false,
            p2q: false,
            mimic: false,
            pretrained_pv_backbone_share: false,
        }
    }

    /// `+UA-Decoder` row.
    pub fn ua_decoder() -> Self {
        Self {
            ua_attention: true,
            ua_head: true,
            ..Self::baseline()
        }
    }

    /// `+UI2DPrompt` row: prompts with both injections and the mimic pool.
    pub fn prompts_only() -> Self {
        Self {
            ui2dprompt: true,
            p2bev: true,
            p2q: true,
            mimic: true,
            ..Self::baseline()
        }
    }

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "ua_attention" => &mut self.ua_attention,
            "ua_head" => &mut self.ua_head,
            "ui2dprompt" => &mut self.ui2dprompt,
            "p2bev" => &mut self.p2bev,
            "p2q" => &mut self.p2q,
            "mimic" => &mut self.mimic,
            "pretrained_pv_backbone_share" => &mut self.pretrained_pv_backbone_share,
            _ => return None,
        })
    }

    /// Applies a comma list on top of `self`. Items are a preset (`full`,
    /// `baseline`, `ua_decoder`, `prompts`), a flag name to enable it, or
    /// `no_<flag>` to disable it.
    pub fn apply_list(&mut self, list: &str) -> Result<()> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "full" => *self = Self::full(),
                "baseline" => *self = Self::baseline(),
                "ua_decoder" => *self = Self::ua_decoder(),
                "prompts" => *self = Self::prompts_only(),
                _ => {
                    let (name, on) = match item.strip_prefix("no_") {
                        Some(rest) => (rest, false),
                        None => (item, true),
                    };
                    *self.slot(name).ok_or_else(|| Error::Config(format!("unknown flag {item:?}")))? = on;
                }
            }
        }
        Ok(())
    }

    /// Comma list of the enabled flags, or `none`.
    pub fn describe(&self) -> String {
        let mut me = self.clone();
        let on: Vec<&str> = Self::NAMES.iter().copied().filter(|n| *me.slot(n).unwrap()).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes generated before splitting.
    pub scenes: usize,
    pub val_ratio: f64,
    pub strategy: SplitStrategy,
    pub gen: GenParams,
    pub raster: RasterConfig,
    pub train_degradation: Degradation,
    pub val_degradation: Degradation,
    /// Image-space ground-truth runs shorter than this are dropped, pixels.
    pub pv_min_pixels: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 250,
            val_ratio: 0.2,
            strategy: SplitStrategy::Region,
            gen: GenParams::default(),
            raster: RasterConfig::default(),
            train_degradation: Degradation::patches(0.15),
            val_degradation: Degradation::patches(0.3),
            pv_min_pixels: 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub points: usize,
    pub samples: usize,
    pub pv_queries: usize,
    pub pv_layers: usize,
    pub pv_points: usize,
    pub mimic_pool: usize,
    /// One image-space loss unit, pixels.
    pub pv_unit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            queries: 20,
            dim: 64,
            layers: 3,
            points: 20,
            samples: 4,
            pv_queries: 10,
            pv_layers: 2,
            pv_points: 20,
            mimic_pool: 20,
            pv_unit: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub pv_lr: f64,
    pub pv_steps: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Fraction of training steps whose map decoder sees the mimic prompt
    /// set instead of the image-branch prompts (distillation still targets
    /// the latter).
    pub mimic_mix: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            steps: 2000,
            pv_lr: 1e-3,
            pv_steps: 1500,
            clip: 10.0,
            mimic_mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub attention: AttentionMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Full,
            attention: AttentionMode::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Selection threshold on image-space detection scores.
    pub c_thr: f64,
    pub omega_scope: OmegaScope,
    pub optim: OptimConfig,
    pub flags: Flags,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            c_thr: DEFAULT_SCORE_THRESHOLD,
            omega_scope: OmegaScope::Instance,
            optim: OptimConfig::default(),
            flags: Flags::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced sizes for smoke runs and tests.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.data.scenes = 12;
        c.data.val_ratio = 0.25;
        c.model.queries = 8;
        c.model.dim = 16;
        c.model.layers = 2;
        c.model.points = 10;
        c.data.gen.n_points = 10;
        c.model.samples = 2;
        c.model.pv_queries = 4;
        c.model.pv_layers = 1;
        c.model.pv_points = 10;
        c.model.mimic_pool = 8;
        c.optim.steps = 6;
        c.optim.pv_steps = 6;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = &self.loss;
        for (name, v) in [("pts", l.pts), ("cls", l.cls), ("nll", l.nll), ("distill", l.distill), ("cost_cls", l.cost_cls), ("cost_pts", l.cost_pts)] {
            if !(v >= 0.0) {
                return bad(format!("loss weight {name} = {v} must be ≥ 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.c_thr) {
            return bad(format!("c_thr {} outside [0, 1]", self.c_thr));
        }
        if !(0.0..=1.0).contains(&self.optim.mimic_mix) {
            return bad(format!("mimic_mix {} outside [0, 1]", self.optim.mimic_mix));
        }
        let m = &self.model;
        if m.queries == 0 || m.layers == 0 || m.samples == 0 || m.pv_queries == 0 || m.pv_layers == 0 || m.mimic_pool == 0 {
            return bad("model sizes must be positive".into());
        }
        if m.dim < 4 || m.dim % 4 != 0 {
            return bad(format!("dim {} must be a positive multiple of 4", m.dim));
        }
        if m.points < 2 || m.pv_points < 2 {
            return bad("polylines need at least 2 points".into());
        }
        if !(m.pv_unit > 0.0) {
            return bad("pv_unit must be positive".into());
        }
        if !(self.data.val_ratio > 0.0 && self.data.val_ratio < 1.0) {
            return bad(format!("val_ratio {} outside (0, 1)", self.data.val_ratio));
        }
        if self.data.scenes < 2 {
            return bad("need at least 2 scenes".into());
        }
        if self.data.gen.n_points != m.points {
            return bad(format!("generator points {} differ from model points {}", self.data.gen.n_points, m.points));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.pv_lr > 0.0 && o.clip > 0.0) {
            return bad("learning rates and clip must be positive".into());
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Git-style content digest: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
