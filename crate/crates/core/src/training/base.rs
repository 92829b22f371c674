use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::losses::{assign_anchors, assign_rois, cross_entropy, box_regression_grad, rpn_loss, sample_anchors, sample_rois, RoiLabel};
use super::optimizer::Sgd;
use crate::detector::{image_to_chw, Branch, Detector, Gradients, Mode, RegressorMode, RoiGradRequest, Stage};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn;
use crate::synthdata::AnnotatedImage;

/// Loss components of one base-stage step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub lr: f64,
    pub rpn: f64,
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
}

/// Optimizer state and the sampling stream of one training stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Sgd,
    pub step: usize,
    rng: ChaCha8Rng,
}

fn check_finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { component, value })
    }
}

pub(crate) fn scale_grads(grads: &mut Gradients, s: f64) {
    for g in grads.values_mut() {
        *g *= s;
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            config,
        })
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One SGD step on `L_rpn + L_cls + L_loc` averaged over `batch`.
    pub fn base_train_step(&mut self, ckpt: &mut Checkpoint, batch: &[&AnnotatedImage]) -> Result<LossBreakdown> {
        let (mut out, grads) = self.base_loss_and_grads(ckpt, batch)?;
        let lr = self.config.lr_at(self.step);
        self.optimizer.step(&mut ckpt.params, &grads, lr)?;
        out.lr = lr;
        self.step += 1;
        ckpt.metadata.step = self.step;
        Ok(out)
    }

    /// Batch-mean losses and gradients without updating anything but the sampling stream.
    pub fn base_loss_and_grads(&mut self, ckpt: &Checkpoint, batch: &[&AnnotatedImage]) -> Result<(LossBreakdown, Gradients)> {
        self.batch_grads(ckpt, batch, None).map(|(l, g, _)| (l, g))
    }

    /// As [`Trainer::base_loss_and_grads`]; `pinned` replaces the per-image candidate RoIs
    /// (proposals plus ground truth), which are otherwise returned for reuse.
    pub(crate) fn batch_grads(
        &mut self,
        ckpt: &Checkpoint,
        batch: &[&AnnotatedImage],
        pinned: Option<&[Vec<BBox>]>,
    ) -> Result<(LossBreakdown, Gradients, Vec<Vec<BBox>>)> {
        ckpt.params.require_stage(Stage::Base)?;
        if batch.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let mut grads = Gradients::new();
        let mut sums = [0.0; 3];
        let det = ckpt.detector()?;
        let mut candidates = Vec::with_capacity(batch.len());
        for (i, image) in batch.iter().enumerate() {
            let pin = pinned.map(|p| p[i].clone());
            let (l_rpn, l_cls, l_loc, rois) = self.image_grads(&det, image, &mut grads, pin)?;
            candidates.push(rois);
            sums[0] += l_rpn;
            sums[1] += l_cls;
            sums[2] += l_loc;
        }
        let n = batch.len() as f64;
        let rpn = check_finite("rpn", sums[0] / n)?;
        let cls = check_finite("cls", sums[1] / n)?;
        let loc = check_finite("loc", sums[2] / n)?;
        scale_grads(&mut grads, 1.0 / n);
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { component: "gradient", value: f64::NAN });
        }
        let out = LossBreakdown { step: self.step, lr: 0.0, rpn, cls, loc, total: rpn + cls + loc };
        Ok((out, grads, candidates))
    }

    fn image_grads(
        &mut self,
        det: &Detector<'_>,
        image: &AnnotatedImage,
        grads: &mut Gradients,
        pinned: Option<Vec<BBox>>,
    ) -> Result<(f64, f64, f64, Vec<BBox>)> {
        let cfg = det.config;
        let sampling = self.config.sampling.clone();
        det.check_image(&image.pixels)?;
        let gt_boxes: Vec<BBox> = image.instances.iter().map(|i| i.bbox).collect();
        let (z, bb_cache) = det.backbone_forward_cached(&image_to_chw(&image.pixels))?;
        let (head, rpn_cache) = det.rpn_head_cached(&z)?;

        let mut labels = assign_anchors(det.anchors(), &gt_boxes, sampling.rpn_positive_iou, sampling.rpn_negative_iou);
        sample_anchors(&mut labels, sampling.rpn_batch, sampling.rpn_positive_fraction, &mut self.rng);
        let rl = rpn_loss(&head.objectness, &head.deltas, det.anchors(), &gt_boxes, &labels);

        let candidates = pinned.unwrap_or_else(|| {
            let mut c: Vec<BBox> = det.propose(&head, Mode::Train).into_iter().map(|p| p.bbox).collect();
            c.extend(gt_boxes.iter().copied());
            c
        });
        let rois = candidates.clone();
        let roi_labels = assign_rois(&rois, &gt_boxes, sampling.roi_positive_iou, sampling.roi_background_iou);
        let keep = sample_rois(&roi_labels, sampling.roi_batch, sampling.roi_positive_fraction, &mut self.rng);
        let rois: Vec<BBox> = keep.iter().map(|&i| rois[i]).collect();
        let roi_labels: Vec<RoiLabel> = keep.iter().map(|&i| roi_labels[i]).collect();

        let bg = det.params.view2(&Branch::Base.cls_w())?.nrows() - 1;
        let targets: Vec<usize> = roi_labels
            .iter()
            .map(|l| match l {
                RoiLabel::Foreground { gt } => image.instances[*gt].class_index,
                _ => bg,
            })
            .collect();
        if let Some(&bad) = targets.iter().find(|&&t| t > bg) {
            return Err(Error::DataContract(format!("base-stage image carries non-base class index {bad}")));
        }

        let (pooled, argmax) = nn::roi_max_pool(z.view(), &rois, cfg.stride() as f64, cfg.roi_pool_size);
        let (f, roi_cache) = det.roi_feature_cached(pooled, Branch::Base)?;
        let logits = det.classify(f.view(), Branch::Base)?;
        let (l_cls, dlogits) = cross_entropy(logits.view(), &targets)?;

        let raw = det.regress_raw(f.view())?;
        let cols = |t: usize| match cfg.regressor {
            RegressorMode::Agnostic => 0,
            RegressorMode::Specific => 4 * t,
        };
        let mut pred = Vec::with_capacity(rois.len());
        let mut tgt = Vec::with_capacity(rois.len());
        let mut positive = Vec::with_capacity(rois.len());
        for (r, label) in roi_labels.iter().enumerate() {
            let c = cols(targets[r]);
            pred.push(crate::detector::delta_at(&raw, r, c));
            match label {
                RoiLabel::Foreground { gt } => {
                    tgt.push(rois[r].encode(&gt_boxes[*gt]));
                    positive.push(true);
                }
                _ => {
                    tgt.push([0.0; 4]);
                    positive.push(false);
                }
            }
        }
        let (l_loc, dpred) = box_regression_grad(&pred, &tgt, &positive);
        let mut draw = Array2::<f64>::zeros(raw.dim());
        for (r, d) in dpred.iter().enumerate() {
            let c = cols(targets[r]);
            for q in 0..4 {
                draw[[r, c + q]] = d[q];
            }
        }

        let mut df = det.classify_backward(f.view(), Branch::Base, dlogits.view(), grads)?;
        df += &det.regress_backward(f.view(), draw.view(), grads)?;
        let dpooled = det
            .roi_feature_backward(&roi_cache, df, Branch::Base, RoiGradRequest::ALL, grads)?
            .expect("input gradient requested");
        let mut dz: Array3<f64> = nn::roi_max_pool_backward(&argmax, z.dim(), dpooled.view());
        dz += &det.rpn_head_backward(&rpn_cache, &rl.d_objectness, &rl.d_deltas, grads)?;
        det.backbone_backward(&bb_cache, dz, grads)?;
        Ok((rl.total(), l_cls, l_loc, candidates))
    }
}
