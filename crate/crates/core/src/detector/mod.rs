//! Miniature two-stage detector: conv backbone, region proposal network, two-layer RoI
//! feature extractor with parallel base/novel branches, classification heads and the
//! box regressor.

mod backprop;
mod config;
pub mod head;
mod params;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub use backprop::{BackboneCache, RoiCache, RoiGradRequest, RpnCache};
pub use config::{ClassifierMode, DetectorConfig, Mode, RegressorMode, BACKBONE_BLOCKS};
pub use params::{names, Branch, Gradients, Param, ParameterStore, Stage};
pub(crate) use params::accumulate;

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta};
use crate::inference::nms;
use crate::nn;
use crate::synthdata::AnnotatedImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid of the objectness logit.
    pub objectness: f64,
}

/// Raw RPN outputs; anchor `k` lives at cell `k / A`, anchor shape `k % A`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnHead {
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    /// `(R, |base| + 1)`, background last.
    pub p_base_logits: Array2<f64>,
    /// `(R, |novel|)`; only present on a branched checkpoint.
    pub p_novel_logits: Option<Array2<f64>>,
    /// Raw regressor output, `(R, 4)` agnostic or `(R, 4·(|base|+1))` specific.
    pub box_deltas: Array2<f64>,
}

impl BranchOutputs {
    /// `[p_base, p_novel]` per RoI.
    pub fn joint_logits(&self) -> Array2<f64> {
        match &self.p_novel_logits {
            Some(novel) => concatenate![Axis(1), self.p_base_logits, *novel],
            None => self.p_base_logits.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointPrediction {
    pub outputs: BranchOutputs,
    /// One softmax over the concatenated logits.
    pub probabilities: Array2<f64>,
}

/// Anchors in cell-major order: `(row, col, scale, ratio)`.
pub fn generate_anchors(config: &DetectorConfig) -> Vec<BBox> {
    let (fh, fw) = config.feature_size();
    let stride = config.stride() as f64;
    let mut out = Vec::with_capacity(fh * fw * config.anchors_per_cell());
    for i in 0..fh {
        for j in 0..fw {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &scale in &config.anchor_scales {
                for &ratio in &config.anchor_ratios {
                    let r = ratio.sqrt();
                    out.push(BBox::from_center(cx, cy, scale / r, scale * r));
                }
            }
        }
    }
    out
}

/// `H×W×C` pixels to a contiguous `C×H×W` map.
pub fn image_to_chw(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

/// Read-only view of a parameter store under a configuration.
#[derive(Clone, Debug)]
pub struct Detector<'a> {
    pub config: &'a DetectorConfig,
    pub params: &'a ParameterStore,
    anchors: Vec<BBox>,
}

impl<'a> Detector<'a> {
    pub fn new(config: &'a DetectorConfig, params: &'a ParameterStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params,
            anchors: generate_anchors(config),
        })
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn stage(&self) -> Stage {
        self.params.stage()
    }

    pub(crate) fn check_image(&self, pixels: &Array3<f64>) -> Result<()> {
        let (h, w, c) = pixels.dim();
        if [h, w] != self.config.canvas || c != 3 {
            return Err(Error::Dimension(format!(
                "image is {h}x{w}x{c}, detector expects {}x{}x3",
                self.config.canvas[0], self.config.canvas[1]
            )));
        }
        Ok(())
    }

    /// Feature map `z` of shape `(C_feat, H/8, W/8)`.
    pub fn backbone_forward(&self, image: &AnnotatedImage) -> Result<Array3<f64>> {
        self.check_image(&image.pixels)?;
        Ok(self.backbone_forward_cached(&image_to_chw(&image.pixels))?.0)
    }

    pub fn rpn_head(&self, z: &Array3<f64>) -> Result<RpnHead> {
        Ok(self.rpn_head_cached(z)?.0)
    }

    /// Top-N proposals after decoding, clipping and proposal-level NMS.
    pub fn rpn_forward(&self, z: &Array3<f64>, mode: Mode) -> Result<Vec<Proposal>> {
        let head = self.rpn_head(z)?;
        Ok(self.propose(&head, mode))
    }

    pub fn propose(&self, head: &RpnHead, mode: Mode) -> Vec<Proposal> {
        let (h, w) = (self.config.canvas[0] as f64, self.config.canvas[1] as f64);
        let mut cands: Vec<(usize, BBox, f64)> = self
            .anchors
            .iter()
            .zip(head.deltas.iter().zip(&head.objectness))
            .enumerate()
            .filter_map(|(k, (anchor, (delta, &logit)))| {
                let b = anchor.decode(delta).clip(w, h);
                (b.is_valid() && b.width() >= 1.0 && b.height() >= 1.0 && logit.is_finite()).then_some((k, b, logit))
            })
            .collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        cands.truncate(self.config.rpn_pre_nms_top_n);
        let boxes: Vec<BBox> = cands.iter().map(|c| c.1).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.2).collect();
        let keep = nms(&boxes, &scores, self.config.rpn_nms_iou);
        keep.into_iter()
            .take(self.config.post_nms_top_n(mode))
            .map(|i| Proposal {
                bbox: boxes[i],
                objectness: sigmoid(scores[i]),
            })
            .collect()
    }

    pub fn roi_pool(&self, z: ArrayView3<f64>, boxes: &[BBox]) -> Array2<f64> {
        nn::roi_max_pool(z, boxes, self.config.stride() as f64, self.config.roi_pool_size).0
    }

    /// `ReLU(fc2(ReLU(fc1(pooled))))` through the requested branch.
    pub fn roi_feature_forward(&self, pooled: ArrayView2<f64>, branch: Branch) -> Result<Array2<f64>> {
        Ok(self.roi_feature_cached(pooled.to_owned(), branch)?.0)
    }

    pub fn classify(&self, f: ArrayView2<f64>, head: Branch) -> Result<Array2<f64>> {
        self.require_branch(head)?;
        let w = self.params.view2(&head.cls_w())?;
        self.check_width(f, w.ncols())?;
        Ok(match self.config.classifier {
            ClassifierMode::Linear => head::linear_logits(f, w, Some(self.params.view1(&head.cls_b())?)),
            ClassifierMode::Cosine => head::cosine_logits(f, w, self.config.cosine_scale),
        })
    }

    /// Raw regressor output for every RoI.
    pub fn regress_raw(&self, f: ArrayView2<f64>) -> Result<Array2<f64>> {
        let w = self.params.view2(names::REG_W)?;
        self.check_width(f, w.ncols())?;
        Ok(nn::linear_forward(f, w, Some(self.params.view1(names::REG_B)?)))
    }

    /// Per-RoI box deltas. Agnostic mode ignores `class_hint`; specific mode needs a base
    /// class (or background) hint.
    pub fn regress_boxes(&self, f: ArrayView2<f64>, class_hint: Option<usize>) -> Result<Vec<BoxDelta>> {
        let raw = self.regress_raw(f)?;
        let col = match self.config.regressor {
            RegressorMode::Agnostic => 0,
            RegressorMode::Specific => {
                let c = class_hint.ok_or_else(|| {
                    Error::Argument("class-specific regressor needs a class hint".into())
                })?;
                if 4 * c + 4 > raw.ncols() {
                    return Err(Error::Argument(format!(
                        "class-specific regressor has no row for class index {c}"
                    )));
                }
                4 * c
            }
        };
        Ok(raw.rows().into_iter().map(|r| [r[col], r[col + 1], r[col + 2], r[col + 3]]).collect())
    }

    /// Base-path logits and regressor output for the given proposals.
    pub fn base_path(&self, z: &Array3<f64>, proposals: &[Proposal]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = self.roi_pool(z.view(), &boxes);
        let f = self.roi_feature_forward(pooled.view(), Branch::Base)?;
        let logits = self.classify(f.view(), Branch::Base)?;
        let deltas = self.regress_raw(f.view())?;
        Ok((pooled, logits, deltas))
    }

    /// Per-RoI outputs of both branches and the joint softmax.
    pub fn joint_predict(&self, z: &Array3<f64>, proposals: &[Proposal]) -> Result<JointPrediction> {
        self.params.require_stage(Stage::Branched)?;
        self.predict(z, proposals)
    }

    /// Like [`Detector::joint_predict`] but also accepts a base-stage store, whose label
    /// space is `|base| + 1` ways.
    pub fn predict(&self, z: &Array3<f64>, proposals: &[Proposal]) -> Result<JointPrediction> {
        let (pooled, p_base_logits, box_deltas) = self.base_path(z, proposals)?;
        let p_novel_logits = match self.stage() {
            Stage::Base => None,
            Stage::Branched => {
                let f = self.roi_feature_forward(pooled.view(), Branch::Novel)?;
                Some(self.classify(f.view(), Branch::Novel)?)
            }
        };
        let outputs = BranchOutputs {
            p_base_logits,
            p_novel_logits,
            box_deltas,
        };
        let probabilities = nn::softmax_rows(outputs.joint_logits().view());
        Ok(JointPrediction { outputs, probabilities })
    }

    fn require_branch(&self, branch: Branch) -> Result<()> {
        if branch == Branch::Novel {
            self.params.require_stage(branch.required_stage())?;
        }
        Ok(())
    }

    fn check_width(&self, x: ArrayView2<f64>, expected: usize) -> Result<()> {
        if x.ncols() != expected {
            return Err(Error::Dimension(format!("input width {} != expected {expected}", x.ncols())));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Four columns of a specific/agnostic regressor row as a delta.
pub(crate) fn delta_at(raw: &Array2<f64>, row: usize, col: usize) -> BoxDelta {
    let r = raw.slice(s![row, col..col + 4]);
    [r[0], r[1], r[2], r[3]]
}

#[cfg(test)]
mod tests;
