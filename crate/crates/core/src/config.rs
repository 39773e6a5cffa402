//! Experiment configuration: JSON in, validated and variant-checked, with a
//! stable digest for checkpoint provenance. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::relation::{RelationEncoderSpec, RelationGenConfig, RelationLossConfig};
use crate::tensor::Real;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum EdgeSourceConfig {
    /// Deterministic per-predicate stand-in embeddings.
    Idealized,
    /// Frozen relationship-encoder checkpoint applied to synthetic pair maps.
    Encoder { checkpoint: PathBuf, noise: Real },
}

/// Configuration of one VQA experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    #[serde(default = "d_default")]
    pub d: usize,
    #[serde(default = "d_default")]
    pub d_q: usize,
    #[serde(default = "d_default")]
    pub d_f: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default = "n_max_default")]
    pub n_max: usize,
    /// Optional pin on the answer-vocabulary size; training fails when the
    /// built vocabulary disagrees.
    #[serde(default)]
    pub n_a: Option<usize>,
    #[serde(default = "mlp_hidden_default")]
    pub mlp_hidden: usize,
    #[serde(default = "dropout_default")]
    pub dropout: Real,
    #[serde(default = "one")]
    pub gru_layers: usize,
    #[serde(default)]
    pub question_attention: bool,
    #[serde(default = "edge_width_default")]
    pub edge_width: usize,
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "lr_default")]
    pub lr: Real,
    #[serde(default = "one_f")]
    pub lr_decay: Real,
    #[serde(default)]
    pub weight_decay: Real,
    #[serde(default = "clip_default")]
    pub clip_norm: Real,
    #[serde(default = "one")]
    pub answer_threshold: usize,
    #[serde(default)]
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub edge_source: EdgeSourceConfig,
}

fn d_default() -> usize {
    512
}
fn one() -> usize {
    1
}
fn one_f() -> Real {
    1.0
}
fn n_max_default() -> usize {
    crate::graph::DEFAULT_N_MAX
}
fn mlp_hidden_default() -> usize {
    1024
}
fn dropout_default() -> Real {
    0.5
}
fn edge_width_default() -> usize {
    512
}
fn batch_default() -> usize {
    256
}
fn epochs_default() -> usize {
    20
}
fn lr_default() -> Real {
    0.001
}
fn clip_default() -> Real {
    0.25
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural and variant-implied constraints.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "learning rate, decay, and clip norm must be positive".into(),
            ));
        }
        match self.variant {
            Variant::PlusWidth => {
                if self.d != 1024 || self.d_q != 1024 {
                    return Err(Error::Config(
                        "+width fixes d = 1024 and d_q = 1024".into(),
                    ));
                }
            }
            Variant::PlusQAtt => {
                if self.gru_layers != 2 || !self.question_attention {
                    return Err(Error::Config(
                        "+q_att requires gru_layers = 2 and question_attention".into(),
                    ));
                }
            }
            Variant::Baseline => {
                if self.question_attention {
                    return Err(Error::Config(
                        "baseline uses the final GRU state, not question attention".into(),
                    ));
                }
            }
            _ => {}
        }
        // the remaining structural checks (heads vs variant, d % heads)
        // live on the model config and run at construction
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a digest of the canonical JSON; stable across runs.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a(self.canonical_json().as_bytes()))
    }
}

/// Configuration of relationship-encoder training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelTrainConfig {
    /// Manifest directory with real samples. When absent, `synthetic` is
    /// generated in memory.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<RelationGenConfig>,
    /// Loader cap on samples per predicate.
    #[serde(default)]
    pub cap_per_predicate: Option<usize>,
    #[serde(default)]
    pub encoder: RelationEncoderSpec,
    #[serde(default)]
    pub loss: RelationLossConfig,
    #[serde(default = "rel_epochs_default")]
    pub epochs: usize,
    #[serde(default = "rel_lr_default")]
    pub lr: Real,
    #[serde(default = "rel_decay_default")]
    pub lr_decay: Real,
    #[serde(default = "rel_wd_default")]
    pub weight_decay: Real,
    /// Held-out samples per predicate for the recall@1 report.
    #[serde(default = "holdout_default")]
    pub holdout_per_predicate: usize,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn rel_epochs_default() -> usize {
    5
}
fn rel_lr_default() -> Real {
    1e-4
}
fn rel_decay_default() -> Real {
    0.8
}
fn rel_wd_default() -> Real {
    1e-4
}
fn holdout_default() -> usize {
    5
}

impl RelTrainConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RelTrainConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("bad relation-training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(
                "epochs, lr, and lr_decay must be positive".into(),
            ));
        }
        if self.data_dir.is_none() && self.synthetic.is_none() {
            return Err(Error::Config(
                "either data_dir or synthetic must be given".into(),
            ));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a(self.canonical_json().as_bytes()))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
