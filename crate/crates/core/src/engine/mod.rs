//! Staged training (blur, then pinv, then vdn), checkpoints, metrics and evaluation.

mod checkpoint;
mod eval;
pub mod metrics;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{ArrayInfo, Checkpoint, CheckpointMeta, FrozenRef, ModelSpec, FORMAT_VERSION, MAGIC, OPTIMIZER_NOTE};
pub use eval::{crop, evaluate, pad_reflect, reference_rows, EvalMode, EvalReport, EvalRequest, ReportRow, Restorer, RowKind, REFERENCE_TAG};
pub use metrics::{psnr, ssim, ColorSpace, Metric, Psnr, Ssim, PSNR_CAP};
pub use train::{pinv_of_clip, train_stage, ModelConfigs, Prerequisites, StepStats, TrainOutcome, Trainer};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::types::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Blur,
    Pinv,
    Vdn,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Blur => "blur",
            Stage::Pinv => "pinv",
            Stage::Vdn => "vdn",
        })
    }
}

/// Optimisation settings for one stage. Defaults are the desk-scale values;
/// [`TrainConfig::paper`] gives the full-scale ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Global gradient-norm clip. Unset: 1.0 for the vdn stage, off otherwise. `0` disables.
    pub clip_grad_norm: Option<f64>,
    pub augment: AugmentConfig,
    pub workers: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Blur,
            batch_size: 4,
            lr_start: 1e-3,
            lr_end: 1e-6,
            epochs: 2,
            iters_per_epoch: 100,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            loss: LossWeights::default(),
            clip_grad_norm: None,
            augment: AugmentConfig {
                crop: Some(32),
                ..AugmentConfig::default()
            },
            workers: 1,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// Batch 32, 160 epochs of 5000 iterations, 128×128 crops.
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: 32,
            epochs: 160,
            iters_per_epoch: 5000,
            augment: AugmentConfig::default(),
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.iters_per_epoch) as u64
    }

    pub fn effective_clip(&self) -> Option<f64> {
        match self.clip_grad_norm {
            Some(v) if v > 0.0 => Some(v),
            Some(_) => None,
            None => (self.stage == Stage::Vdn).then_some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr_end <= self.lr_start && self.lr_end >= 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 ≤ lr_end ≤ lr_start, got {} / {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.iters_per_epoch == 0 || self.workers == 0 {
            return Err(Error::Config("batch size, epochs, iterations and workers must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step == total_steps {
        return Ok(lr_end);
    }
    if step == 0 {
        return Ok(lr_start);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}
