//! Training: continual pre-training, instruction SFT and DPO objectives,
//! the warmup + cosine schedule, AdamW, finite-difference gradient checks,
//! the step loop with checkpoints, and emissions estimates.

mod gradcheck;
mod objectives;
mod optim;
mod run;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LoraConfig, ModelError};

pub use gradcheck::{grad_check, GradCheck};
pub use objectives::{
    cpt_loss_grad, cpt_step, dpo_loss_grad, dpo_step, response_logprob, sft_loss_grad, sft_step, DpoOutput, PrefExample,
};
pub use optim::AdamW;
pub use run::{plan_batches, run, RunOptions, RunOutput, StepRecord, TrainData, TrainReport, TrainSummary};

/// kg CO2 per device-hour fitted to the three reference rows of the
/// published carbon table (97.01/561.40, 34.52/199.76, 12.91/74.73).
pub const FITTED_KG_PER_DEVICE_HOUR: f64 = 0.1728;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("every position in the batch is masked out")]
    AllMasked,
    #[error("empty batch")]
    EmptyBatch,
    #[error("chosen and rejected responses are identical")]
    IdenticalResponses,
    #[error("training data does not match objective {0}")]
    DataMismatch(Objective),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("train report: {0}")]
    Report(String),
    #[error("emissions: {0}")]
    Emissions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::databuild::DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Cpt,
    Sft,
    Dpo,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cpt => "cpt",
            Objective::Sft => "sft",
            Objective::Dpo => "dpo",
        })
    }
}

impl FromStr for Objective {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpt" => Ok(Objective::Cpt),
            "sft" => Ok(Objective::Sft),
            "dpo" => Ok(Objective::Dpo),
            _ => Err(TrainError::Config(format!(
                "unknown objective {s:?}, expected cpt|sft|dpo"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

fn default_warmup() -> f64 {
    0.10
}
fn default_floor() -> f64 {
    0.10
}
fn default_epochs() -> usize {
    1
}
fn default_beta() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta")]
    pub dpo_beta: f64,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when unset.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps; off when unset.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    pub fn new(objective: Objective, peak_lr: f64, batch_tokens: usize) -> Self {
        TrainConfig {
            objective,
            peak_lr,
            warmup_fraction: default_warmup(),
            schedule: Schedule::Cosine,
            floor_fraction: default_floor(),
            epochs: default_epochs(),
            batch_tokens,
            seed: 0,
            dpo_beta: default_beta(),
            lora: None,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            weight_decay: 0.0,
            grad_clip: None,
            checkpoint_every: None,
        }
    }

    /// Continual pre-training: peak 1e-4, 10% warmup, 4 epochs.
    pub fn cpt_default(batch_tokens: usize) -> Self {
        TrainConfig {
            epochs: 4,
            ..Self::new(Objective::Cpt, 1e-4, batch_tokens)
        }
    }

    /// Instruction tuning: peak 2e-5 with rank-64 LoRA on query/value.
    pub fn sft_default(batch_tokens: usize) -> Self {
        TrainConfig {
            lora: Some(LoraConfig::sft_default()),
            ..Self::new(Objective::Sft, 2e-5, batch_tokens)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} must be in (0, 1)", self.warmup_fraction));
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.dpo_beta > 0.0) {
            return bad(format!("dpo_beta {} must be positive", self.dpo_beta));
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) {
            return bad(format!("floor_fraction {} must be in [0, 1]", self.floor_fraction));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        (self.warmup_fraction * total_steps as f64).round() as u64
    }
}

/// Learning rate at `step` of `total_steps`: a linear ramp from 0 to the
/// peak over the warmup steps, then a half cosine from the peak down to
/// `floor_fraction · peak` at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(TrainError::Schedule("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(TrainError::Schedule(format!(
            "step {step} is past total_steps {total_steps}"
        )));
    }
    let peak = cfg.peak_lr;
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if warmup == total_steps {
        return Ok(peak);
    }
    let floor = cfg.floor_fraction * peak;
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// `device_hours × kg_per_device_hour`, rounded to two decimals.
pub fn estimate_emissions(device_hours: f64, kg_per_device_hour: f64) -> Result<f64> {
    if !(device_hours >= 0.0) || !(kg_per_device_hour >= 0.0) {
        return Err(TrainError::Emissions(format!(
            "inputs must be non-negative (hours {device_hours}, factor {kg_per_device_hour})"
        )));
    }
    Ok((device_hours * kg_per_device_hour * 100.0).round() / 100.0)
}

/// Least-squares factor through the origin for `(hours, kg)` rows.
pub fn fit_emission_factor(rows: &[(f64, f64)]) -> Option<f64> {
    let hh: f64 = rows.iter().map(|(h, _)| h * h).sum();
    if hh == 0.0 {
        return None;
    }
    Some(rows.iter().map(|(h, k)| h * k).sum::<f64>() / hh)
}
