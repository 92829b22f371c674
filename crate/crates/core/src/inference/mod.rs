//! Detection pipeline: proposals, joint classification, box decoding, thresholding and
//! class-wise NMS.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{delta_at, Mode, RegressorMode, Stage};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::{AnnotatedImage, ClassVocabulary};
use crate::training::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Joint label-space index; never the background index.
    pub class_index: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl DetectOptions {
    pub fn from_config(config: &crate::detector::DetectorConfig) -> Self {
        Self {
            score_threshold: config.score_threshold,
            nms_iou: config.nms_iou,
            max_detections: config.max_detections,
        }
    }

    pub fn with_threshold(mut self, score_threshold: f64) -> Self {
        self.score_threshold = score_threshold;
        self
    }
}

/// Default rendering threshold.
pub const RENDER_SCORE_THRESHOLD: f64 = 0.5;

/// Greedy NMS. Candidates are visited by descending score, then ascending box coordinates,
/// then ascending index; a candidate is dropped when its IoU with a kept box exceeds
/// `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| boxes[a].total_cmp(&boxes[b]))
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Checks that the checkpoint heads match the vocabulary widths.
pub fn check_vocabulary(ckpt: &Checkpoint, vocab: &ClassVocabulary) -> Result<()> {
    let base_rows = ckpt.params.get("cls.base.W")?.shape()[0];
    if base_rows != vocab.num_base() + 1 {
        return Err(Error::Dimension(format!(
            "base head has {base_rows} ways, vocabulary needs {}",
            vocab.num_base() + 1
        )));
    }
    if ckpt.stage() == Stage::Branched {
        let novel_rows = ckpt.params.get("cls.novel.W")?.shape()[0];
        if novel_rows != vocab.num_novel() {
            return Err(Error::Dimension(format!(
                "novel head has {novel_rows} ways, vocabulary has {} novel classes",
                vocab.num_novel()
            )));
        }
    }
    Ok(())
}

pub fn detect(image: &AnnotatedImage, ckpt: &Checkpoint, vocab: &ClassVocabulary) -> Result<Vec<Detection>> {
    detect_with(image, ckpt, vocab, DetectOptions::from_config(&ckpt.config))
}

/// Full pipeline. Each RoI's box is decoded once and shared by all of its class
/// hypotheses (agnostic mode); the class-specific regressor has no rows for novel
/// classes, so novel hypotheses keep the proposal box there.
pub fn detect_with(
    image: &AnnotatedImage,
    ckpt: &Checkpoint,
    vocab: &ClassVocabulary,
    options: DetectOptions,
) -> Result<Vec<Detection>> {
    check_vocabulary(ckpt, vocab)?;
    let det = ckpt.detector()?;
    let z = det.backbone_forward(image)?;
    let proposals = det.rpn_forward(&z, Mode::Eval)?;
    let pred = det.predict(&z, &proposals)?;
    let (h, w) = (image.height() as f64, image.width() as f64);
    let bg = vocab.background_index();
    let regressor = det.config.regressor;

    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); pred.probabilities.ncols()];
    for (r, proposal) in proposals.iter().enumerate() {
        let shared = (regressor == RegressorMode::Agnostic)
            .then(|| proposal.bbox.decode(&delta_at(&pred.outputs.box_deltas, r, 0)).clip(w, h));
        for (c, &score) in pred.probabilities.row(r).iter().enumerate() {
            if c == bg || !(score > 0.0) || score < options.score_threshold {
                continue;
            }
            let bbox = match shared {
                Some(b) => b,
                None if vocab.is_base(c) => proposal.bbox.decode(&delta_at(&pred.outputs.box_deltas, r, 4 * c)).clip(w, h),
                None => proposal.bbox,
            };
            if !bbox.is_valid() {
                continue;
            }
            per_class[c].push(Detection {
                bbox,
                class_index: c,
                score,
            });
        }
    }

    let mut out: Vec<Detection> = Vec::new();
    for dets in per_class {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, options.nms_iou).into_iter().map(|i| dets[i]));
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_index.cmp(&b.class_index))
            .then_with(|| a.bbox.total_cmp(&b.bbox))
    });
    out.truncate(options.max_detections);
    Ok(out)
}

/// One line of a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub class_name: String,
    pub score: f64,
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
}

impl DetectionRecord {
    pub fn new(image_id: u64, det: &Detection, vocab: &ClassVocabulary) -> Self {
        Self {
            image_id,
            class_name: vocab.name_of(det.class_index).unwrap_or("?").to_string(),
            score: det.score,
            bbox: [det.bbox.x1, det.bbox.y1, det.bbox.x2, det.bbox.y2],
        }
    }

    pub fn to_detection(&self, vocab: &ClassVocabulary) -> Result<(u64, Detection)> {
        let class_index = vocab
            .index_of(&self.class_name)
            .ok_or_else(|| Error::Argument(format!("unknown class `{}` in detection dump", self.class_name)))?;
        let [x1, y1, x2, y2] = self.bbox;
        Ok((
            self.image_id,
            Detection {
                bbox: BBox::new(x1, y1, x2, y2),
                class_index,
                score: self.score,
            },
        ))
    }
}

/// Writes one JSON record per line.
pub fn write_detection_dump(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detection_dump(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_box_kept() {
        assert_eq!(nms(&[BBox::new(0.0, 0.0, 1.0, 1.0)], &[0.3], 0.5), vec![0]);
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn third_overlap_survives_half_threshold() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(5.0, 0.0, 15.0, 10.0)];
        assert_eq!(nms(&boxes, &[0.9, 0.8], 0.5), vec![0, 1]);
    }

    #[test]
    fn equal_scores_prefer_lower_index_for_identical_boxes() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        assert_eq!(nms(&[b, b, b], &[0.5, 0.5, 0.5], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u8..40, 0u8..40, 1u8..20, 1u8..20)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn order_invariant(items in prop::collection::vec((arb_box(), 0u8..5), 1..12), rot in 0usize..12) {
            let boxes: Vec<BBox> = items.iter().map(|i| i.0).collect();
            let scores: Vec<f64> = items.iter().map(|i| i.1 as f64 / 4.0).collect();
            let kept: Vec<(u64, u64, u64, u64, u64)> = {
                let mut v: Vec<_> = nms(&boxes, &scores, 0.5).into_iter().map(|i| key(&boxes[i], scores[i])).collect();
                v.sort();
                v
            };
            let n = boxes.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
            let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let mut kept2: Vec<_> = nms(&pb, &ps, 0.5).into_iter().map(|i| key(&pb[i], ps[i])).collect();
            kept2.sort();
            prop_assert_eq!(kept, kept2);
        }

        #[test]
        fn kept_boxes_pairwise_below_threshold(boxes in prop::collection::vec(arb_box(), 1..15)) {
            let scores: Vec<f64> = (0..boxes.len()).map(|i| 1.0 / (i + 1) as f64).collect();
            let keep = nms(&boxes, &scores, 0.4);
            for (a, &i) in keep.iter().enumerate() {
                for &j in &keep[a + 1..] {
                    prop_assert!(boxes[i].iou(&boxes[j]) <= 0.4);
                }
            }
        }
    }

    fn key(b: &BBox, s: f64) -> (u64, u64, u64, u64, u64) {
        (b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits(), s.to_bits())
    }
}
