//! Run configuration: one JSON object with `data`, `vae`, `aligner`,
//! `diffusion`, `sample` and `eval` sections plus a global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseDims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(rename = "K")]
    pub keypoints: usize,
    pub d: usize,
    #[serde(rename = "U")]
    pub max_len: usize,
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { keypoints: 79, d: 2, max_len: 256, path: None }
    }
}

impl DataConfig {
    pub fn dims(&self) -> Result<PoseDims> {
        PoseDims::new(self.keypoints, self.d, self.max_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub d_sign: usize,
    #[serde(rename = "L_tok")]
    pub latent_tokens: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub kl_weight: f64,
    /// Fraction of all steps over which the KL weight ramps up linearly.
    pub kl_warmup: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            d_sign: 20,
            latent_tokens: 16,
            width: 128,
            depth: 2,
            heads: 4,
            kl_weight: 1e-3,
            kl_warmup: 0.1,
            epochs: 1000,
            lr: 1e-4,
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    pub d_s: usize,
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Similarities are divided by this before the softmax; 1 leaves them as is.
    pub temperature: f64,
    /// Averages the pose→text and text→pose directions.
    pub symmetric: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig { d_s: 512, width: 256, epochs: 1000, lr: 1e-4, batch: 256, temperature: 1.0, symmetric: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Multiplier on the semantic term; 0 trains on the noise loss alone.
    pub semantic_weight: f64,
    /// Discounts the semantic term by `1 - t/T`.
    pub time_factor: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            width: 128,
            heads: 4,
            epochs: 1000,
            lr: 1e-4,
            batch: 256,
            semantic_weight: 1.0,
            time_factor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { seed: 0, count: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslatorKind {
    Oracle,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub translator: TranslatorKind,
    /// End-of-Sign detection threshold.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { translator: TranslatorKind::Oracle, threshold: crate::pose::DEFAULT_EOS_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub aligner: AlignerConfig,
    pub diffusion: DiffusionConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Full-scale settings: 256-frame clips, batch 256, 1000 epochs, lr 1e-4.
    pub fn full() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            aligner: AlignerConfig::default(),
            diffusion: DiffusionConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Laptop-sized settings for the synthetic grammar.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig { max_len: 128, ..DataConfig::default() },
            vae: VaeConfig {
                latent_tokens: 8,
                width: 64,
                depth: 1,
                epochs: 150,
                lr: 1e-3,
                batch: 8,
                ..VaeConfig::default()
            },
            aligner: AlignerConfig { epochs: 500, lr: 1e-3, batch: 32, ..AlignerConfig::default() },
            diffusion: DiffusionConfig { width: 64, epochs: 500, lr: 1e-3, batch: 32, ..DiffusionConfig::default() },
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        let dims = self.data.dims()?;
        let v = &self.vae;
        if v.d_sign == 0 || v.latent_tokens == 0 || v.width == 0 || v.heads == 0 || v.batch == 0 {
            return bad("vae sizes must be positive");
        }
        if dims.max_len % v.latent_tokens != 0 {
            return bad("U must be a multiple of L_tok");
        }
        if !v.width.is_multiple_of(v.heads) || !self.diffusion.width.is_multiple_of(self.diffusion.heads.max(1)) {
            return bad("model widths must be multiples of the head count");
        }
        if !v.width.is_multiple_of(2) || !self.diffusion.width.is_multiple_of(2) {
            return bad("model widths must be even");
        }
        if !(v.kl_weight >= 0.0) || !(0.0..=1.0).contains(&v.kl_warmup) {
            return bad("kl_weight must be non-negative and kl_warmup in [0, 1]");
        }
        let a = &self.aligner;
        if a.d_s == 0 || a.width == 0 || a.batch == 0 || !(a.temperature > 0.0) {
            return bad("aligner sizes and temperature must be positive");
        }
        let d = &self.diffusion;
        if d.steps == 0 || d.width == 0 || d.heads == 0 || d.batch == 0 {
            return bad("diffusion sizes must be positive");
        }
        if !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1");
        }
        if !(d.semantic_weight >= 0.0) {
            return bad("semantic_weight must be non-negative");
        }
        for lr in [v.lr, a.lr, d.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        if !(self.eval.threshold > 0.0) {
            return bad("eval threshold must be positive");
        }
        Ok(())
    }
}
