use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchor and RoI sampling thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    /// Anchors at or above this IoU with some ground truth are positive.
    pub rpn_positive_iou: f64,
    /// Anchors below this IoU with every ground truth are negative.
    pub rpn_negative_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
    /// Base stage: RoIs below this IoU are background.
    pub roi_background_iou: f64,
    /// Fine-tune stage: RoIs below this IoU to every novel ground truth are background.
    pub finetune_background_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            roi_batch: 32,
            roi_positive_fraction: 0.25,
            roi_positive_iou: 0.5,
            roi_background_iou: 0.5,
            finetune_background_iou: 0.3,
        }
    }
}

/// Optimizer and schedule for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Steps at which the rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    /// Linear warmup from `warmup_factor · learning_rate`.
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            learning_rate: 0.01,
            decay_steps: vec![1400, 1800],
            decay_factor: 0.1,
            warmup_steps: 100,
            warmup_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            sampling: SamplingConfig::default(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.001,
            decay_steps: vec![150, 200],
            warmup_steps: 0,
            steps: 300,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("decay steps {:?} must be strictly increasing", self.decay_steps)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let s = &self.sampling;
        if s.rpn_batch == 0 || s.roi_batch == 0 {
            return Err(Error::Config("sampling batch sizes must be positive".into()));
        }
        if s.rpn_negative_iou > s.rpn_positive_iou || s.finetune_background_iou > s.roi_positive_iou {
            return Err(Error::Config("negative IoU thresholds must not exceed positive ones".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&d| step >= d).count();
        let mut lr = self.learning_rate * self.decay_factor.powi(decays as i32);
        if step < self.warmup_steps {
            let alpha = step as f64 / self.warmup_steps as f64;
            lr *= self.warmup_factor * (1.0 - alpha) + alpha;
        }
        lr
    }
}
