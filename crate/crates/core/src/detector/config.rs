use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorMode {
    #[default]
    Agnostic,
    Specific,
}

impl std::fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassifierMode::Linear => "linear",
            ClassifierMode::Cosine => "cosine",
        })
    }
}

impl std::fmt::Display for RegressorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorMode::Agnostic => "agnostic",
            RegressorMode::Specific => "specific",
        })
    }
}

/// Proposal generation mode; train mode keeps more proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// `[height, width]` of input images.
    pub canvas: [usize; 2],
    /// Output channels of the four backbone blocks; the first three end in 2×2 max pooling.
    pub backbone_channels: Vec<usize>,
    pub rpn_channels: usize,
    /// Anchor side lengths in pixels.
    pub anchor_scales: Vec<f64>,
    /// Anchor height/width ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n_train: usize,
    pub rpn_post_nms_top_n_eval: usize,
    pub rpn_nms_iou: f64,
    /// RoI pooling grid `P` (output is `P×P` per channel).
    pub roi_pool_size: usize,
    /// Width `d` of fc1 and fc2.
    pub roi_feature_dim: usize,
    pub classifier: ClassifierMode,
    pub cosine_scale: f64,
    pub regressor: RegressorMode,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            canvas: [64, 64],
            backbone_channels: vec![16, 32, 32, 32],
            rpn_channels: 32,
            anchor_scales: vec![16.0, 22.0, 30.0],
            anchor_ratios: vec![0.8, 1.25],
            rpn_pre_nms_top_n: 200,
            rpn_post_nms_top_n_train: 64,
            rpn_post_nms_top_n_eval: 32,
            rpn_nms_iou: 0.7,
            roi_pool_size: 4,
            roi_feature_dim: 128,
            classifier: ClassifierMode::Linear,
            cosine_scale: 20.0,
            regressor: RegressorMode::Agnostic,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
        }
    }
}

pub const BACKBONE_BLOCKS: usize = 4;
const POOLED_BLOCKS: usize = 3;

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.cosine_scale > 0.0) {
            return bad(format!("cosine scale must be positive, got {}", self.cosine_scale));
        }
        if self.roi_pool_size < 2 {
            return bad(format!("RoI pool size must be at least 2, got {}", self.roi_pool_size));
        }
        if self.roi_feature_dim < 8 {
            return bad(format!("RoI feature width must be at least 8, got {}", self.roi_feature_dim));
        }
        if self.backbone_channels.len() != BACKBONE_BLOCKS || self.backbone_channels.contains(&0) {
            return bad(format!("backbone needs {BACKBONE_BLOCKS} nonzero channel widths"));
        }
        if self.rpn_channels == 0 {
            return bad("rpn_channels must be nonzero".into());
        }
        let stride = self.stride();
        if self.canvas.iter().any(|&s| s == 0 || s % stride != 0) {
            return bad(format!("canvas {:?} must be a positive multiple of the stride {stride}", self.canvas));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be nonempty".into());
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)) {
            return bad("anchor scales and ratios must be positive".into());
        }
        if self.rpn_post_nms_top_n_train == 0 || self.rpn_post_nms_top_n_eval == 0 {
            return bad("proposal counts must be nonzero".into());
        }
        for (name, v) in [("rpn_nms_iou", self.rpn_nms_iou), ("nms_iou", self.nms_iou), ("score_threshold", self.score_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << POOLED_BLOCKS
    }

    /// `(height, width)` of the backbone feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.canvas[0] / self.stride(), self.canvas[1] / self.stride())
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[BACKBONE_BLOCKS - 1]
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Flattened RoI-pooled width `P·P·C_feat`.
    pub fn pooled_dim(&self) -> usize {
        self.roi_pool_size * self.roi_pool_size * self.feature_channels()
    }

    pub fn post_nms_top_n(&self, mode: Mode) -> usize {
        match mode {
            Mode::Train => self.rpn_post_nms_top_n_train,
            Mode::Eval => self.rpn_post_nms_top_n_eval,
        }
    }

    pub(crate) fn pools_after_block(block: usize) -> bool {
        block < POOLED_BLOCKS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stride(), 8);
        assert_eq!(c.feature_size(), (8, 8));
        assert_eq!(c.anchors_per_cell(), 6);
        assert_eq!(c.pooled_dim(), 512);
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            DetectorConfig { cosine_scale: 0.0, ..Default::default() },
            DetectorConfig { roi_pool_size: 1, ..Default::default() },
            DetectorConfig { roi_feature_dim: 4, ..Default::default() },
            DetectorConfig { canvas: [60, 64], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
