//! Per-stage hyperparameters and freeze sets.

use serde::{Deserialize, Serialize};

use crate::codebook::DEFAULT_GAMMA;
use crate::error::{Error, Result};
use crate::model::VisualMode;
use crate::params::{Partition, PartitionSet};

/// Which text the stage-4 codebook update clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSource {
    Truth,
    Recognized,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    /// Weight of the image commitment loss.
    pub alpha: f64,
    /// Weight of the text commitment loss.
    pub beta: f64,
    /// Codebook EMA decay.
    pub gamma: f64,
    pub dropout: f64,
    /// Source tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub warmup: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Train the patch backbone in this stage.
    pub train_backbone: bool,
    pub ema_source: EmaSource,
    /// What the decoder reads in place of the visual states.
    pub visual_mode: VisualMode,
    /// Keep the alignment and image-commitment terms in stage 4.
    pub include_l3: bool,
    /// Let this stage start from a checkpoint that skipped earlier stages.
    pub allow_skip: bool,
    /// Dev examples decoded per stage-4 evaluation (0 = all).
    pub dev_limit: usize,
    /// Stop after this many steps of the current invocation and leave a
    /// resumable checkpoint.
    #[serde(default)]
    pub stop_after: Option<u64>,
}

impl StageConfig {
    /// Full-size defaults for `stage`.
    pub fn full_scale(stage: u8) -> Result<Self> {
        Self::base(stage)
    }

    /// Desk-scale defaults for `stage`: smaller batches and schedules, and
    /// a gentler final stage that keeps the small pretrained model intact.
    pub fn desk(stage: u8) -> Result<Self> {
        let mut c = Self::base(stage)?;
        c.batch_tokens = if stage <= 2 { 1600 } else { 800 };
        c.warmup = 400;
        c.eval_every = 100;
        c.dev_limit = 200;
        match stage {
            1 => c.max_steps = 1000,
            2 => {
                c.max_steps = 200;
                c.eval_every = 50;
            }
            3 => {
                c.max_steps = 1500;
                c.lr_scale = 0.3;
                c.eval_every = 250;
            }
            _ => {
                c.max_steps = 1000;
                c.lr_scale = 0.3;
                c.warmup = 100;
                c.dropout = 0.1;
                c.beta = 0.01;
            }
        }
        Ok(c)
    }

    fn base(stage: u8) -> Result<Self> {
        if !(1..=4).contains(&stage) {
            return Err(Error::invalid("stage_config", format!("unknown stage {stage}")));
        }
        Ok(Self {
            stage,
            alpha: if stage == 4 { 0.75 } else { 0.25 },
            beta: 0.25,
            gamma: DEFAULT_GAMMA,
            dropout: match stage {
                2 => 0.0,
                4 => 0.3,
                _ => 0.1,
            },
            batch_tokens: if stage <= 2 { 32_768 } else { 4096 },
            max_steps: 100_000,
            warmup: 4000,
            lr_scale: 1.0,
            eval_every: 1000,
            patience: 5,
            label_smoothing: 0.1,
            seed: 1,
            train_backbone: stage == 3,
            ema_source: EmaSource::Truth,
            visual_mode: VisualMode::Codebook,
            include_l3: true,
            allow_skip: false,
            dev_limit: 0,
            stop_after: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("stage_config", msg));
        if !(1..=4).contains(&self.stage) {
            return bad(format!("unknown stage {}", self.stage));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite and non-negative".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)".into());
        }
        if self.batch_tokens == 0 || self.warmup == 0 || self.eval_every == 0 {
            return bad("batch tokens, warmup and eval interval must be positive".into());
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr scale must be positive".into());
        }
        if self.stop_after == Some(0) {
            return bad("stop_after must be positive".into());
        }
        Ok(())
    }

    /// Partitions updated by this stage.
    pub fn trainable(&self) -> PartitionSet {
        let base = match self.stage {
            1 => PartitionSet::of(&[
                Partition::Embedding,
                Partition::TextEncoder,
                Partition::Decoder,
                Partition::Head,
            ]),
            2 => PartitionSet::empty(),
            3 => PartitionSet::of(&[Partition::ImageEncoder]),
            _ => PartitionSet::all().without(Partition::Backbone),
        };
        if self.train_backbone && self.stage >= 3 {
            base.with(Partition::Backbone)
        } else {
            base
        }
    }

    /// The config with the interruption point cleared, for comparing a
    /// resumed run against the one that started it.
    pub fn without_stop(&self) -> Self {
        Self {
            stop_after: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let s3 = StageConfig::desk(3).unwrap();
        assert_eq!((s3.alpha, s3.dropout), (0.25, 0.1));
        let p4 = StageConfig::full_scale(4).unwrap();
        assert_eq!((p4.alpha, p4.beta, p4.dropout), (0.75, 0.25, 0.3));
        let s4 = StageConfig::desk(4).unwrap();
        assert_eq!((s4.alpha, s4.beta, s4.dropout), (0.75, 0.01, 0.1));
        assert_eq!(StageConfig::full_scale(1).unwrap().batch_tokens, 32_768);
        assert_eq!(StageConfig::full_scale(4).unwrap().batch_tokens, 4096);
        assert!(StageConfig::desk(5).is_err());
    }

    #[test]
    fn freeze_sets() {
        let s1 = StageConfig::desk(1).unwrap().trainable();
        assert!(!s1.contains(Partition::ImageEncoder) && !s1.contains(Partition::Backbone));
        assert!(StageConfig::desk(2).unwrap().trainable().is_empty());
        let s3 = StageConfig::desk(3).unwrap().trainable();
        assert!(s3.contains(Partition::Backbone) && !s3.contains(Partition::TextEncoder));
        let s4 = StageConfig::desk(4).unwrap().trainable();
        assert!(!s4.contains(Partition::Backbone) && s4.contains(Partition::TextEncoder));
    }

    #[test]
    fn negative_weights_rejected() {
        let mut c = StageConfig::desk(4).unwrap();
        c.alpha = -0.1;
        assert!(c.validate().is_err());
    }
}
