use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, Link, Received, TxKey};
use crate::error::{Error, Result};
use crate::evidential::FinetuneConfig;
use crate::pretrain::{Objective, PretrainConfig};
use crate::synthdata::DataConfig;

/// A channel shared by all modalities, optionally overridden per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    #[serde(flatten)]
    pub base: ChannelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_modality: Option<Vec<ChannelConfig>>,
}

impl From<ChannelConfig> for LinkConfig {
    fn from(base: ChannelConfig) -> Self {
        Self {
            base,
            per_modality: None,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.per_modality
            .iter()
            .flatten()
            .try_for_each(ChannelConfig::validate)
    }

    pub fn for_modality(&self, m: usize) -> &ChannelConfig {
        self.per_modality
            .as_ref()
            .and_then(|v| v.get(m))
            .unwrap_or(&self.base)
    }

    /// Same link with every channel seed mixed with the run seed.
    pub fn reseeded(&self, run_seed: u64) -> Self {
        let mix = |c: &ChannelConfig| ChannelConfig {
            seed: crate::rng::splitmix64(c.seed ^ crate::rng::splitmix64(run_seed)),
            ..*c
        };
        Self {
            base: mix(&self.base),
            per_modality: self
                .per_modality
                .as_ref()
                .map(|v| v.iter().map(mix).collect()),
        }
    }

    pub fn label(&self) -> String {
        match &self.per_modality {
            None => self.base.snr_db.label(),
            Some(v) => v
                .iter()
                .map(|c| c.snr_db.label())
                .collect::<Vec<_>>()
                .join("/"),
        }
    }
}

impl Link for LinkConfig {
    fn send(&self, z: &[f64], key: TxKey) -> Result<Received> {
        self.for_modality(key.modality as usize).send(z, key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    /// Feature width K; must match the pre-training partition.
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            feature_dim: 16,
            head_hidden: vec![],
        }
    }
}

/// Which link the retransmission threshold is calibrated through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    Clean,
    /// The fine-tuning link.
    Channel,
    /// The inference link.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub n_max: usize,
    pub per_modality: bool,
    pub calibrate_on: CalibrationSource,
    /// Downlink symbols charged per retransmission request.
    pub feedback_cost: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            n_max: 3,
            per_modality: false,
            calibrate_on: CalibrationSource::Channel,
            feedback_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_pretrain: bool,
    pub intra_only: bool,
    pub shared_only: bool,
    pub ce_concat_baseline: bool,
    pub no_retx: bool,
}

/// Optional communication budgets. Training stops before the next epoch
/// would exceed `max_train_symbols`; the inference cap is only reported.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub max_train_symbols: Option<u64>,
    pub max_infer_symbols_per_sample: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Samples used for training; the rest of `data.n` is the test split.
    pub n_train: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Link used during fine-tuning.
    pub channel: LinkConfig,
    /// Link used at inference; defaults to `channel`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_channel: Option<LinkConfig>,
    pub policy: PolicyConfig,
    pub ablation: Ablation,
    pub budget: Budget,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Absolute accuracy targets reported as rounds-to-target.
    pub targets: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            n_train: 2000,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            channel: ChannelConfig::awgn(10.0, 0).into(),
            eval_channel: None,
            policy: PolicyConfig::default(),
            ablation: Ablation::default(),
            budget: Budget::default(),
            seeds: vec![0],
            output_dir: None,
            targets: vec![0.4, 0.45, 0.5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.n_train == 0 || self.n_train >= self.data.n {
            return Err(Error::invalid(format!(
                "n_train = {} must lie in [1, {})",
                self.n_train, self.data.n
            )));
        }
        if self.model.feature_dim == 0
            || self.model.encoder_hidden.contains(&0)
            || self.model.head_hidden.contains(&0)
        {
            return Err(Error::invalid("layer widths must be ≥ 1"));
        }
        if !self.ablation.no_pretrain && self.pretrain.partition.dim() != self.model.feature_dim {
            return Err(Error::invalid(format!(
                "feature partition covers {} features but the encoders emit {}",
                self.pretrain.partition.dim(),
                self.model.feature_dim
            )));
        }
        if self.ablation.intra_only && self.ablation.shared_only {
            return Err(Error::invalid(
                "intra_only and shared_only are mutually exclusive",
            ));
        }
        if self.data.labels.n_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if !(self.policy.alpha > 0.0 && self.policy.alpha < 1.0) {
            return Err(Error::invalid("α must lie in (0, 1)"));
        }
        if !(self.policy.feedback_cost >= 0.0 && self.policy.feedback_cost.is_finite()) {
            return Err(Error::invalid("feedback cost must be finite and ≥ 0"));
        }
        if let Some(t) = self.targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!(
                "accuracy target {t} outside [0, 1]"
            )));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.channel.validate()?;
        if let Some(c) = &self.eval_channel {
            c.validate()?;
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        if self.ablation.intra_only {
            Objective::IntraOnly
        } else if self.ablation.shared_only {
            Objective::SharedOnly
        } else {
            Objective::Proposed
        }
    }

    pub fn eval_link(&self) -> &LinkConfig {
        self.eval_channel.as_ref().unwrap_or(&self.channel)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
