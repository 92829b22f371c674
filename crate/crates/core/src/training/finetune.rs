use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;

use super::base::{scale_grads, Trainer};
use super::checkpoint::Checkpoint;
use super::config::SamplingConfig;
use super::freeze::FreezePolicy;
use super::losses::{assign_rois, cross_entropy, sample_rois, RoiLabel};
use crate::detector::{Branch, Detector, Gradients, Mode, RoiGradRequest, Stage};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::AnnotatedImage;

/// Frozen-path quantities of one support image, computed once before fine-tuning:
/// pooled RoI features, base-head logits and joint-space targets for every candidate RoI.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSample {
    pub image_id: u64,
    pub rois: Vec<BBox>,
    pub pooled: Array2<f64>,
    pub base_logits: Array2<f64>,
    pub labels: Vec<RoiLabel>,
    /// Joint index per RoI; background for background RoIs, unused for ignored ones.
    pub targets: Vec<usize>,
}

/// Runs the frozen backbone, RPN and base path over each support image and labels the
/// candidate RoIs against its novel ground truth.
pub fn prepare_support(
    ckpt: &Checkpoint,
    items: &[AnnotatedImage],
    sampling: &SamplingConfig,
) -> Result<Vec<SupportSample>> {
    ckpt.params.require_stage(Stage::Branched)?;
    let vocab = &ckpt.vocabulary;
    let det = ckpt.detector()?;
    let mut out = Vec::with_capacity(items.len());
    for image in items {
        if let Some(bad) = image.instances.iter().find(|i| !vocab.is_novel(i.class_index)) {
            return Err(Error::DataContract(format!(
                "support image {} carries non-novel class index {}",
                image.image_id, bad.class_index
            )));
        }
        let z = det.backbone_forward(image)?;
        let gt: Vec<BBox> = image.instances.iter().map(|i| i.bbox).collect();
        let mut rois: Vec<BBox> = det.rpn_forward(&z, Mode::Train)?.into_iter().map(|p| p.bbox).collect();
        rois.extend(gt.iter().copied());
        let labels = assign_rois(&rois, &gt, sampling.roi_positive_iou, sampling.finetune_background_iou);
        let proposals: Vec<crate::detector::Proposal> =
            rois.iter().map(|&bbox| crate::detector::Proposal { bbox, objectness: 1.0 }).collect();
        let (pooled, base_logits, _) = det.base_path(&z, &proposals)?;
        let targets = labels
            .iter()
            .map(|l| match l {
                RoiLabel::Foreground { gt } => image.instances[*gt].class_index,
                _ => vocab.background_index(),
            })
            .collect();
        out.push(SupportSample { image_id: image.image_id, rois, pooled, base_logits, labels, targets });
    }
    Ok(out)
}

/// Joint cross-entropy over `[p_base, p_novel]` for the given RoIs and its gradients with
/// respect to the trainable novel-branch tensors only.
pub fn joint_loss_and_grads(
    det: &Detector<'_>,
    pooled: Array2<f64>,
    base_logits: &Array2<f64>,
    targets: &[usize],
) -> Result<(f64, Gradients)> {
    det.params.require_stage(Stage::Branched)?;
    let (f, cache) = det.roi_feature_cached(pooled, Branch::Novel)?;
    let novel_logits = det.classify(f.view(), Branch::Novel)?;
    let joint = concatenate![Axis(1), *base_logits, novel_logits];
    let (loss, dlogits) = cross_entropy(joint.view(), targets)?;
    let nb = base_logits.ncols();
    let mut grads = Gradients::new();
    let df = det.classify_backward(f.view(), Branch::Novel, dlogits.slice(s![.., nb..]), &mut grads)?;
    let request = RoiGradRequest {
        fc2: det.params.is_trainable(&Branch::Novel.fc_w(2)),
        fc1: det.params.is_trainable(&Branch::Novel.fc_w(1)),
        input: false,
    };
    det.roi_feature_backward(&cache, df, Branch::Novel, request, &mut grads)?;
    Ok((loss, grads))
}

impl Trainer {
    /// One SGD step of the joint loss over `batch`; only trainable tensors move.
    pub fn finetune_step(&mut self, ckpt: &mut Checkpoint, batch: &[&SupportSample]) -> Result<f64> {
        ckpt.params.require_stage(Stage::Branched)?;
        let policy = ckpt
            .metadata
            .freeze_policy
            .ok_or_else(|| Error::Argument("apply a freeze policy before fine-tuning".into()))?;
        if batch.is_empty() {
            return Err(Error::Argument("empty support batch".into()));
        }
        let sampling = self.config.sampling.clone();
        let mut grads = Gradients::new();
        let mut total = 0.0;
        {
            let det = ckpt.detector()?;
            for sample in batch {
                let keep = sample_rois(&sample.labels, sampling.roi_batch, sampling.roi_positive_fraction, self.rng());
                if keep.is_empty() {
                    continue;
                }
                let pooled = sample.pooled.select(Axis(0), &keep);
                let base_logits = sample.base_logits.select(Axis(0), &keep);
                let targets: Vec<usize> = keep.iter().map(|&i| sample.targets[i]).collect();
                let (loss, g) = joint_loss_and_grads(&det, pooled, &base_logits, &targets)?;
                total += loss;
                for (k, v) in g {
                    crate::detector::accumulate(&mut grads, k, v);
                }
            }
        }
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { component: "cls", value: loss });
        }
        scale_grads(&mut grads, 1.0 / n);
        let trainable = FreezePolicy::new(policy).trainable_set(&ckpt.params);
        if let Some(name) = grads.keys().find(|k| !trainable.contains(*k)) {
            return Err(Error::FrozenUpdate(name.clone()));
        }
        let lr = self.config.lr_at(self.step);
        self.optimizer.step(&mut ckpt.params, &grads, lr)?;
        self.step += 1;
        ckpt.metadata.step = self.step;
        Ok(loss)
    }

    /// Indices of the next `batch_size` items, drawn from a reshuffled cycle over `n`.
    pub fn next_batch(&mut self, order: &mut Vec<usize>, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        if n == 0 {
            return out;
        }
        while out.len() < self.config.batch_size.min(n) {
            if order.is_empty() {
                *order = (0..n).collect();
                order.shuffle(self.rng());
                order.reverse();
            }
            out.push(order.pop().expect("non-empty"));
        }
        out
    }
}
