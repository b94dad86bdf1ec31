//! Run configuration.
//!
//! One JSON object, every field optional. Dotted keys address nested fields
//! for command-line overrides, e.g. `hp.alpha=2.0` or `model.feature_dim=8`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label_embedding::LabelDepth;
use crate::losses::HyperParams;
use crate::similarity::Measure;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Sslcl,
    Supcon,
    CeOnly,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Sslcl => "sslcl",
            LossMode::Supcon => "supcon",
            LossMode::CeOnly => "ce-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of each modality projection.
    pub hidden: usize,
    /// Penultimate feature dimension `d`, shared with the label embeddings.
    pub feature_dim: usize,
    /// Label table width `d_e`; `null` means `2·feature_dim`.
    pub label_dim: Option<usize>,
    /// Hidden width of the three-layer label network; `null` means `label_dim`.
    pub label_middle: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            feature_dim: 8,
            label_dim: None,
            label_middle: None,
        }
    }
}

impl ModelConfig {
    pub fn label_dim(&self) -> usize {
        self.label_dim.unwrap_or(2 * self.feature_dim)
    }

    pub fn label_middle(&self) -> usize {
        self.label_middle.unwrap_or_else(|| self.label_dim())
    }
}

/// Where training data comes from: a feature file, or a synthetic preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<String>,
    pub preset: String,
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            preset: "meld-like".into(),
            n: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub similarity: Measure,
    pub label_depth: LabelDepth,
    pub loss_mode: LossMode,
    /// Masked-modality views as extra positives.
    pub augmentation: bool,
    /// Include `l_neg` in the objective.
    pub use_negative_loss: bool,
    /// Use each view's own scores in its positive-loss denominator.
    pub consistent_denominator: bool,
    /// Train only the label network.
    pub freeze_encoder: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub encoder_lr: f64,
    pub label_lr: f64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Seed of the train/validation/test split, shared by every run.
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            similarity: Measure::SoftHgr,
            label_depth: LabelDepth::TwoLayer,
            loss_mode: LossMode::Sslcl,
            augmentation: true,
            use_negative_loss: true,
            consistent_denominator: false,
            freeze_encoder: false,
            batch_size: 8,
            epochs: 12,
            seeds: vec![0, 1, 2, 3, 4],
            encoder_lr: 1e-3,
            label_lr: 1e-5,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            split_seed: 0,
        }
    }
}

pub const SEED_ENV: &str = "SSLCL_SEED";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Applies `key=value`. The value is parsed as JSON when possible and
    /// taken as a bare string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = self.to_value();
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
        assignments.into_iter().try_for_each(|a| self.apply_override(a))
    }

    /// Replaces the seed list from `SSLCL_SEED` (comma-separated) if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seeds = parse_seed_list(&raw)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        let checks = [
            ("batch_size", self.batch_size >= 1),
            ("epochs", self.epochs >= 1),
            ("seeds", !self.seeds.is_empty()),
            ("encoder_lr", self.encoder_lr > 0.0 && self.encoder_lr.is_finite()),
            ("label_lr", self.label_lr > 0.0 && self.label_lr.is_finite()),
            ("adam.beta1", (0.0..1.0).contains(&self.adam.beta1)),
            ("adam.beta2", (0.0..1.0).contains(&self.adam.beta2)),
            ("adam.eps", self.adam.eps > 0.0),
            ("model.hidden", self.model.hidden >= 1),
            ("model.feature_dim", self.model.feature_dim >= 1),
            ("model.label_dim", self.model.label_dim() >= 1),
            ("model.label_middle", self.model.label_middle() >= 1),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("`{key}` is out of range")));
            }
        }
        if self.label_depth == LabelDepth::EmbeddingOnly && self.model.label_dim() != self.model.feature_dim {
            return Err(Error::Config(
                "`label_depth` embedding-only requires `model.label_dim` == `model.feature_dim`".into(),
            ));
        }
        Ok(())
    }

    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_seed_list(raw: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = raw
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: `{s}` is not an integer")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("{SEED_ENV} is empty")));
    }
    Ok(seeds)
}
