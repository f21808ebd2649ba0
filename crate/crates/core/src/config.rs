//! Run configuration: one JSON document describing model, training, data and loss.
//!
//! Parsing is strict (`deny_unknown_fields`) and [`RunConfig::validate`]
//! reports the first offending field by its dotted path. [`RunConfig::canonical`]
//! fills every defaulted field so that the serialized form is stable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, EnsembleConfig, StageConfig};
use crate::loss::{AccuracyMode, LabelWeights, DEFAULT_EPS};
use crate::vit::VitConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config at `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Backbone ensemble feeding the encoder.
    NCnnVit,
    /// Encoder applied to non-overlapping image patches.
    RawVit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_kernel() -> usize {
    3
}

/// Per-backbone identity within the ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub seed: u64,
    #[serde(default = "default_tag")]
    pub pretraining_tag: String,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_tag() -> String {
    "default".into()
}

fn default_true() -> bool {
    true
}

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub n_backbones: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
    /// One entry per backbone; left empty, members get seeds `seed + 1 + i`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberSpec>,
    /// Per-backbone 1×1 reduction width; 0 disables the reduction.
    #[serde(default)]
    pub reduce_channels: usize,
    pub vit: VitConfig,
    /// Seeds the encoder and head initialisation.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Evaluate on the validation source every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub ckpt_every: u64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            steps: 100,
            seed: 0,
            eval_every: 0,
            ckpt_every: 0,
            grad_clip: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parameters of a generated synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_synth: Option<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Raw (unnormalised) label weights; the standard `(2,1,1,1,1,1)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub eps: f64,
    pub accuracy: AccuracyMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: None,
            eps: DEFAULT_EPS,
            accuracy: AccuracyMode::PerLabel,
        }
    }
}

impl LossConfig {
    pub fn label_weights(&self, num_labels: usize) -> Result<LabelWeights, ConfigError> {
        let w = match &self.weights {
            Some(w) => LabelWeights::new(w),
            None => LabelWeights::standard(num_labels),
        };
        w.map_err(|e| invalid("loss.weights", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Self::parse_named(text, "<inline>")
    }

    fn parse_named(text: &str, name: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: name.to_string(),
            source,
        })
    }

    /// Reads, validates and canonicalises a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_named(&text, &path.display().to_string())?.canonical()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        let o = &t.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(invalid("train.optimizer.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(invalid("train.optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(invalid("train.optimizer.beta2", "must lie in [0, 1)"));
        }
        if o.eps <= 0.0 {
            return Err(invalid("train.optimizer.eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(invalid("train.optimizer.momentum", "must lie in [0, 1)"));
        }
        if let Some(c) = t.grad_clip {
            if c <= 0.0 {
                return Err(invalid("train.grad_clip", "must be positive"));
            }
        }
        if self.data.manifest.is_some() && self.data.synth.is_some() {
            return Err(invalid("data", "give either `manifest` or `synth`, not both"));
        }
        if self.data.val_manifest.is_some() && self.data.val_synth.is_some() {
            return Err(invalid(
                "data",
                "give either `val_manifest` or `val_synth`, not both",
            ));
        }
        for (field, s) in [("data.synth", &self.data.synth), ("data.val_synth", &self.data.val_synth)] {
            if let Some(s) = s {
                if s.size < 16 {
                    return Err(invalid(format!("{field}.size"), "must be at least 16"));
                }
            }
        }
        if !(self.loss.eps > 0.0 && self.loss.eps < 0.5) {
            return Err(invalid("loss.eps", "must lie in (0, 0.5)"));
        }
        self.loss.label_weights(self.model.vit.num_labels)?;
        Ok(())
    }

    /// Validates and fills every defaulted field.
    pub fn canonical(mut self) -> Result<Self, ConfigError> {
        self.validate()?;
        self.model = self.model.canonical()?;
        if self.loss.weights.is_none() {
            let w = self.loss.label_weights(self.model.vit.num_labels)?;
            self.loss.weights = Some(w.as_slice().to_vec());
        }
        Ok(self)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

impl ModelConfig {
    /// Parses a bare `model` section.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<inline>".into(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.image_size == 0 {
            return Err(invalid("model.image_size", "must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(invalid("model.in_channels", "must be at least 1"));
        }
        self.vit.validate("model.vit")?;
        match self.mode {
            ModelMode::RawVit => {
                if self.backbone.is_some() {
                    return Err(invalid("model.backbone", "raw_vit mode forbids a backbone section"));
                }
                if self.n_backbones != 0 || !self.members.is_empty() {
                    return Err(invalid("model.n_backbones", "raw_vit mode takes no backbones"));
                }
                if self.reduce_channels != 0 {
                    return Err(invalid("model.reduce_channels", "raw_vit mode takes no reduction"));
                }
                let p = self.vit.patch_size;
                if p == 0 || !self.image_size.is_multiple_of(p) {
                    return Err(invalid(
                        "model.vit.patch_size",
                        format!("must divide image_size {}", self.image_size),
                    ));
                }
            }
            ModelMode::NCnnVit => {
                let Some(bb) = &self.backbone else {
                    return Err(invalid("model.backbone", "required in n_cnn_vit mode"));
                };
                if self.n_backbones == 0 {
                    return Err(invalid("model.n_backbones", "must be at least 1"));
                }
                if !self.members.is_empty() && self.members.len() != self.n_backbones {
                    return Err(invalid(
                        "model.members",
                        format!("expected {} entries, got {}", self.n_backbones, self.members.len()),
                    ));
                }
                if bb.stages.is_empty() {
                    return Err(invalid("model.backbone.stages", "needs at least one stage"));
                }
                if bb.kernel_size == 0 || bb.kernel_size % 2 == 0 {
                    return Err(invalid("model.backbone.kernel_size", "must be odd"));
                }
                for (i, s) in bb.stages.iter().enumerate() {
                    let field = format!("model.backbone.stages[{i}]");
                    if s.out_channels == 0 {
                        return Err(invalid(format!("{field}.out_channels"), "must be at least 1"));
                    }
                    if s.stride != 1 && s.stride != 2 {
                        return Err(invalid(format!("{field}.stride"), "must be 1 or 2"));
                    }
                    if s.blocks_per_stage == 0 {
                        return Err(invalid(format!("{field}.blocks_per_stage"), "must be at least 1"));
                    }
                }
                let cumulative: usize = bb.stages.iter().map(|s| s.stride).product();
                if !self.image_size.is_multiple_of(cumulative) {
                    return Err(invalid(
                        "model.image_size",
                        format!("{} not divisible by cumulative stride {cumulative}", self.image_size),
                    ));
                }
                let width = bb.stages.last().map(|s| s.out_channels).unwrap_or(0);
                if self.reduce_channels > width {
                    return Err(invalid(
                        "model.reduce_channels",
                        format!("exceeds per-backbone width {width}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn canonical(mut self) -> Result<Self, ConfigError> {
        self.validate()?;
        if self.mode == ModelMode::NCnnVit && self.members.is_empty() {
            self.members = (0..self.n_backbones)
                .map(|i| MemberSpec {
                    seed: self.seed.wrapping_add(1 + i as u64),
                    pretraining_tag: default_tag(),
                    trainable: true,
                })
                .collect();
        }
        Ok(self)
    }

    /// Backbone ensemble described by this config; `None` in raw_vit mode.
    pub fn ensemble(&self) -> Option<EnsembleConfig> {
        let bb = self.backbone.as_ref()?;
        let members: Vec<MemberSpec> = if self.members.is_empty() {
            self.clone().canonical().ok()?.members
        } else {
            self.members.clone()
        };
        let backbones = members
            .into_iter()
            .map(|m| BackboneConfig {
                stages: bb.stages.clone(),
                input_channels: self.in_channels,
                kernel_size: bb.kernel_size,
                seed: m.seed,
                pretraining_tag: m.pretraining_tag,
                trainable: m.trainable,
            })
            .collect();
        Some(EnsembleConfig {
            backbones,
            reduce_channels: self.reduce_channels,
        })
    }

    /// Stable 64-bit digest of the canonical architecture, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let canon = self.clone().canonical().unwrap_or_else(|_| self.clone());
        fnv1a64(&serde_json::to_vec(&canon).expect("config serializes"))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
