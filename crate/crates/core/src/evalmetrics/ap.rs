use crate::geometry::BBox;

/// COCO IoU grid `0.50:0.05:0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Greedy matching for one class in one image. `detections` must be sorted by descending
/// score. Each detection takes the highest-IoU unmatched ground truth with
/// `IoU >= iou_threshold` (lowest index on ties). Returns `true` for true positives.
pub fn match_detections(detections: &[BBox], ground_truths: &[BBox], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; ground_truths.len()];
    detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truths.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = d.iou(gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP over TP/FP labels in score order.
///
/// `None` when there is nothing to score (no ground truth and no detections); `Some(0.0)`
/// when there are detections but no ground truth.
pub fn average_precision(labels: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return (!labels.is_empty()).then_some(0.0);
    }
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &l in labels {
        if l {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// `2ab / (a + b)`, zero when either side is zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}
