//! Loss terms, anchor/RoI assignment and sampling.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta};

/// Mean softmax cross-entropy over rows and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, ways) = logits.dim();
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= ways) {
        return Err(Error::Label { label: bad, ways });
    }
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, ways))));
    }
    let mut grad = crate::nn::softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        grad[[i, t]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss / n as f64, grad))
}

/// Mean cross-entropy of `logits` against `targets`.
pub fn classification_loss(logits: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy(logits, targets)?.0)
}

/// L1 loss averaged over positive rows and the four coordinates, with its gradient.
pub fn box_regression_grad(pred: &[BoxDelta], target: &[BoxDelta], positive: &[bool]) -> (f64, Vec<BoxDelta>) {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if n_pos == 0 {
        return (0.0, grad);
    }
    let norm = 4.0 * n_pos as f64;
    let mut loss = 0.0;
    for i in (0..pred.len()).filter(|&i| positive[i]) {
        for q in 0..4 {
            let d = pred[i][q] - target[i][q];
            loss += d.abs();
            grad[i][q] = if d > 0.0 {
                1.0 / norm
            } else if d < 0.0 {
                -1.0 / norm
            } else {
                0.0
            };
        }
    }
    (loss / norm, grad)
}

pub fn box_regression_loss(pred: &[BoxDelta], target: &[BoxDelta], positive: &[bool]) -> f64 {
    box_regression_grad(pred, target, positive).0
}

/// `max(x, 0) - x·y + ln(1 + exp(-|x|))` and its derivative `σ(x) - y`.
fn bce_with_logits(x: f64, y: f64) -> (f64, f64) {
    (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p(), crate::detector::sigmoid(x) - y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// IoU-threshold assignment; the best anchor for each ground truth is also positive.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], positive_iou: f64, negative_iou: f64) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| a.iou(g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let (g, best) = argmax(row);
            if best >= positive_iou {
                AnchorLabel::Positive { gt: g }
            } else if best < negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for g in 0..gts.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (k, row) in ious.iter().enumerate() {
            if row[g] == best {
                labels[k] = AnchorLabel::Positive { gt: g };
            }
        }
    }
    labels
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Keeps at most `batch · positive_fraction` positives and fills the rest of `batch` with
/// negatives; everything else becomes `Ignore`.
pub fn sample_anchors<R: Rng>(labels: &mut [AnchorLabel], batch: usize, positive_fraction: f64, rng: &mut R) {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive { .. })).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let max_pos = (batch as f64 * positive_fraction) as usize;
    let drop_pos = subsample_drop(&pos, max_pos, rng);
    let kept_pos = pos.len() - drop_pos.len();
    let drop_neg = subsample_drop(&neg, batch.saturating_sub(kept_pos), rng);
    for i in drop_pos.into_iter().chain(drop_neg) {
        labels[i] = AnchorLabel::Ignore;
    }
}

/// Members of `items` not in a uniform subset of size `keep`.
fn subsample_drop<R: Rng>(items: &[usize], keep: usize, rng: &mut R) -> Vec<usize> {
    if items.len() <= keep {
        return Vec::new();
    }
    let mut kept = vec![false; items.len()];
    for i in sample(rng, items.len(), keep) {
        kept[i] = true;
    }
    items.iter().zip(kept).filter(|(_, k)| !k).map(|(&i, _)| i).collect()
}

/// Components of the RPN loss and gradients with respect to objectness logits and deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnLoss {
    pub objectness: f64,
    pub regression: f64,
    pub d_objectness: Vec<f64>,
    pub d_deltas: Vec<BoxDelta>,
}

impl RpnLoss {
    pub fn total(&self) -> f64 {
        self.objectness + self.regression
    }
}

/// Binary objectness cross-entropy over labelled anchors plus L1 on positive anchors.
pub fn rpn_loss(
    objectness: &[f64],
    deltas: &[BoxDelta],
    anchors: &[BBox],
    gts: &[BBox],
    labels: &[AnchorLabel],
) -> RpnLoss {
    let n = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let mut d_objectness = vec![0.0; objectness.len()];
    let mut obj = 0.0;
    let mut positive = vec![false; anchors.len()];
    let mut targets = vec![[0.0; 4]; anchors.len()];
    for (k, label) in labels.iter().enumerate() {
        let y = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Negative => 0.0,
            AnchorLabel::Positive { gt } => {
                positive[k] = true;
                targets[k] = anchors[k].encode(&gts[*gt]);
                1.0
            }
        };
        let (l, g) = bce_with_logits(objectness[k], y);
        obj += l;
        d_objectness[k] = g / n as f64;
    }
    if n > 0 {
        obj /= n as f64;
    }
    let (regression, d_deltas) = box_regression_grad(deltas, &targets, &positive);
    RpnLoss { objectness: obj, regression, d_objectness, d_deltas }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiLabel {
    /// Matched to ground truth `gt`.
    Foreground { gt: usize },
    Background,
    Ignore,
}

/// Positive at `IoU >= positive_iou`, background below `background_iou`, ignored between.
pub fn assign_rois(rois: &[BBox], gts: &[BBox], positive_iou: f64, background_iou: f64) -> Vec<RoiLabel> {
    rois.iter()
        .map(|r| {
            if gts.is_empty() {
                return RoiLabel::Background;
            }
            let (g, best) = argmax(&gts.iter().map(|g| r.iou(g)).collect::<Vec<_>>());
            if best >= positive_iou {
                RoiLabel::Foreground { gt: g }
            } else if best < background_iou {
                RoiLabel::Background
            } else {
                RoiLabel::Ignore
            }
        })
        .collect()
}

/// Indices of up to `batch` RoIs with at most `batch · positive_fraction` foreground,
/// in ascending index order.
pub fn sample_rois<R: Rng>(labels: &[RoiLabel], batch: usize, positive_fraction: f64, rng: &mut R) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], RoiLabel::Foreground { .. })).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == RoiLabel::Background).collect();
    let max_pos = ((batch as f64 * positive_fraction) as usize).max(1);
    let pick = |items: &[usize], k: usize, rng: &mut R| -> Vec<usize> {
        if items.len() <= k {
            items.to_vec()
        } else {
            sample(rng, items.len(), k).into_iter().map(|i| items[i]).collect()
        }
    };
    let mut out = pick(&pos, max_pos, rng);
    let rest = batch.saturating_sub(out.len());
    out.extend(pick(&neg, rest, rng));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_ways() {
        let logits = Array2::<f64>::zeros((3, 10));
        let loss = classification_loss(logits.view(), &[0, 6, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut logits = Array2::<f64>::zeros((1, 4));
        logits[[0, 2]] = 50.0;
        assert!(classification_loss(logits.view(), &[2]).unwrap() < 1e-20);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let logits = Array2::<f64>::zeros((1, 4));
        assert!(matches!(classification_loss(logits.view(), &[4]), Err(Error::Label { label: 4, ways: 4 })));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let logits = ndarray::arr2(&[[0.3, -1.2, 2.0], [1.0, 0.5, -0.5]]);
        let t = [2, 0];
        let (_, g) = cross_entropy(logits.view(), &t).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (classification_loss(p.view(), &t).unwrap() - classification_loss(m.view(), &t).unwrap()) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn l1_reduction_is_per_coordinate_mean() {
        assert_eq!(box_regression_loss(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]], &[true]), 0.25);
        assert_eq!(box_regression_loss(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]], &[false]), 0.0);
        assert_eq!(box_regression_loss(&[[0.5, 0.1, 0.2, 0.3]], &[[0.5, 0.1, 0.2, 0.3]], &[true]), 0.0);
    }

    #[test]
    fn rpn_loss_optimum_is_zero() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        let gts = [BBox::new(1.0, 0.0, 11.0, 10.0)];
        let labels = [AnchorLabel::Positive { gt: 0 }, AnchorLabel::Negative];
        let exact = anchors[0].encode(&gts[0]);
        let l = rpn_loss(&[800.0, -800.0], &[exact, [0.0; 4]], &anchors, &gts, &labels);
        assert_eq!(l.total(), 0.0);
    }

    #[test]
    fn no_gt_means_no_regression() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let labels = assign_anchors(&anchors, &[], 0.7, 0.3);
        assert_eq!(labels, vec![AnchorLabel::Negative]);
        let l = rpn_loss(&[0.0], &[[1.0; 4]], &anchors, &[], &labels);
        assert_eq!(l.regression, 0.0);
        assert!((l.objectness - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn best_anchor_forced_positive() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 20.0, 20.0)];
        let gts = [BBox::new(0.0, 0.0, 14.0, 14.0)];
        let labels = assign_anchors(&anchors, &gts, 0.7, 0.3);
        // IoUs 100/196 and 196/400: both below 0.7, the first is the best match.
        assert_eq!(labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(labels[1], AnchorLabel::Ignore);
    }

    #[test]
    fn ignored_anchors_have_zero_gradient() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(5.0, 5.0, 15.0, 15.0)];
        let gts = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let labels = [AnchorLabel::Positive { gt: 0 }, AnchorLabel::Ignore];
        let l = rpn_loss(&[0.1, 3.0], &[[0.2; 4], [0.7; 4]], &anchors, &gts, &labels);
        assert_eq!(l.d_objectness[1], 0.0);
        assert_eq!(l.d_deltas[1], [0.0; 4]);
    }

    proptest! {
        #[test]
        fn anchor_sampling_respects_budget(n_pos in 0usize..80, n_neg in 0usize..200, seed in any::<u64>()) {
            let mut labels: Vec<AnchorLabel> = (0..n_pos).map(|_| AnchorLabel::Positive { gt: 0 })
                .chain((0..n_neg).map(|_| AnchorLabel::Negative)).collect();
            sample_anchors(&mut labels, 64, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            let pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive { .. })).count();
            let kept = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
            prop_assert!(pos <= 32);
            prop_assert!(kept <= 64);
            prop_assert_eq!(kept, (pos + n_neg).min(64).max(pos));
        }

        #[test]
        fn rpn_loss_nonnegative(x in prop::collection::vec(-20.0f64..20.0, 3), d in prop::collection::vec(-2.0f64..2.0, 12)) {
            let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(4.0, 4.0, 20.0, 20.0), BBox::new(30.0, 30.0, 45.0, 40.0)];
            let gts = [BBox::new(2.0, 1.0, 12.0, 11.0)];
            let labels = assign_anchors(&anchors, &gts, 0.7, 0.3);
            let deltas: Vec<BoxDelta> = d.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            let l = rpn_loss(&x, &deltas, &anchors, &gts, &labels);
            prop_assert!(l.objectness >= 0.0 && l.regression >= 0.0);
        }
    }
}
