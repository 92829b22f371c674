use ndarray::{Array2, Array3};
use proptest::prelude::*;

use super::*;
use crate::synthdata::AnnotatedImage;
use crate::testutil::{tiny_base, tiny_split};
use crate::training::branch_surgery;

fn blank() -> AnnotatedImage {
    AnnotatedImage { pixels: Array3::zeros((64, 64, 3)), instances: Vec::new(), image_id: 0, seed: 0 }
}

#[test]
fn zero_image_gives_finite_features() {
    let ckpt = tiny_base(1);
    let det = ckpt.detector().unwrap();
    let z = det.backbone_forward(&blank()).unwrap();
    assert_eq!(z.dim(), (8, 8, 8));
    assert!(z.iter().all(|v| v.is_finite()));
}

#[test]
fn backbone_is_deterministic_and_pixel_sensitive() {
    let ckpt = tiny_base(1);
    let det = ckpt.detector().unwrap();
    let img = tiny_split().test[0].clone();
    let a = det.backbone_forward(&img).unwrap();
    assert_eq!(a, det.backbone_forward(&img).unwrap());
    let mut changed = img.clone();
    changed.pixels[[20, 20, 0]] += 0.5;
    assert_ne!(a, det.backbone_forward(&changed).unwrap());
}

#[test]
fn wrong_canvas_is_a_dimension_error() {
    let ckpt = tiny_base(1);
    let det = ckpt.detector().unwrap();
    let img = AnnotatedImage { pixels: Array3::zeros((32, 64, 3)), ..blank() };
    assert!(matches!(det.backbone_forward(&img), Err(Error::Dimension(_))));
}

#[test]
fn proposals_are_valid_bounded_and_deterministic() {
    let ckpt = tiny_base(2);
    let det = ckpt.detector().unwrap();
    for img in &tiny_split().test[..3] {
        let z = det.backbone_forward(img).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let p = det.rpn_forward(&z, mode).unwrap();
            assert!(p.len() <= det.config.post_nms_top_n(mode));
            assert!(!p.is_empty());
            assert!(p.iter().all(|p| p.bbox.is_valid() && p.bbox.within(64.0, 64.0)));
        }
        assert_eq!(det.rpn_forward(&z, Mode::Eval).unwrap(), det.rpn_forward(&z, Mode::Eval).unwrap());
    }
}

#[test]
fn anchors_cover_the_feature_grid() {
    let cfg = DetectorConfig::default();
    let a = generate_anchors(&cfg);
    assert_eq!(a.len(), 8 * 8 * 6);
    let (cx, cy) = a[0].center();
    assert!((cx - 4.0).abs() < 1e-12 && (cy - 4.0).abs() < 1e-12);
    let (w, h) = (a[1].width(), a[1].height());
    assert!((h / w - 1.25).abs() < 1e-12);
    assert!((w * h - 16.0 * 16.0).abs() < 1e-9);
}

#[test]
fn zero_input_and_zero_bias_gives_zero_feature() {
    let ckpt = tiny_base(3);
    let det = ckpt.detector().unwrap();
    let f = det.roi_feature_forward(Array2::zeros((2, 8 * 16)).view(), Branch::Base).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn novel_branch_needs_branched_stage() {
    let ckpt = tiny_base(3);
    let det = ckpt.detector().unwrap();
    let err = det.roi_feature_forward(Array2::zeros((1, 128)).view(), Branch::Novel).unwrap_err();
    assert!(matches!(err, Error::Stage { expected: Stage::Branched, found: Stage::Base }));
    let z = det.backbone_forward(&blank()).unwrap();
    let props = det.rpn_forward(&z, Mode::Eval).unwrap();
    assert!(matches!(det.joint_predict(&z, &props), Err(Error::Stage { .. })));
}

#[test]
fn joint_prediction_width_and_normalisation() {
    let base = tiny_base(4);
    let branched = branch_surgery(&base, &base.vocabulary, 9).unwrap();
    let det = branched.detector().unwrap();
    let img = &tiny_split().test[1];
    let z = det.backbone_forward(img).unwrap();
    let props = det.rpn_forward(&z, Mode::Eval).unwrap();
    let pred = det.joint_predict(&z, &props).unwrap();
    assert_eq!(pred.outputs.joint_logits().ncols(), 10);
    assert_eq!(pred.probabilities.ncols(), 10);
    for row in pred.probabilities.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn equal_logits_give_uniform_probability() {
    let p = nn::softmax_rows(Array2::<f64>::from_elem((2, 10), 3.5).view());
    assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
}

#[test]
fn branches_agree_right_after_surgery() {
    let base = tiny_base(5);
    let branched = branch_surgery(&base, &base.vocabulary, 1).unwrap();
    let det = branched.detector().unwrap();
    let pooled = Array2::from_shape_fn((5, 128), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 6.0 - 1.0);
    let fb = det.roi_feature_forward(pooled.view(), Branch::Base).unwrap();
    let fnv = det.roi_feature_forward(pooled.view(), Branch::Novel).unwrap();
    assert_eq!(fb, fnv);
}

#[test]
fn specific_regressor_needs_a_hint() {
    let mut base = tiny_base(6);
    base.config.regressor = RegressorMode::Specific;
    base.params = ParameterStore::init_base(&base.config, &base.vocabulary, 6).unwrap();
    let det = base.detector().unwrap();
    let f = Array2::from_elem((1, 16), 0.3);
    assert!(matches!(det.regress_boxes(f.view(), None), Err(Error::Argument(_))));
    let a = det.regress_boxes(f.view(), Some(0)).unwrap();
    let b = det.regress_boxes(f.view(), Some(2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn linear_identity_head() {
    let w = Array2::<f64>::eye(4);
    let mut f = Array2::<f64>::zeros((1, 4));
    f[[0, 2]] = 1.0;
    let out = head::linear_logits(f.view(), w.view(), Some(ndarray::Array1::zeros(4).view()));
    assert_eq!(out, f);
}

proptest! {
    #[test]
    fn agnostic_regressor_ignores_hint(v in prop::collection::vec(-3.0f64..3.0, 16), a in 0usize..50, b in 0usize..50) {
        let ckpt = tiny_base(7);
        let det = ckpt.detector().unwrap();
        let f = Array2::from_shape_vec((1, 16), v).unwrap();
        let x = det.regress_boxes(f.view(), Some(a)).unwrap();
        let y = det.regress_boxes(f.view(), Some(b)).unwrap();
        let z = det.regress_boxes(f.view(), None).unwrap();
        prop_assert!(x[0].iter().zip(&y[0]).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(x[0].iter().zip(&z[0]).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn cosine_scale_invariant_and_bounded(v in prop::collection::vec(-5.0f64..5.0, 16), w in prop::collection::vec(-1.0f64..1.0, 48), alpha in 0.01f64..100.0) {
        let f = Array2::from_shape_vec((1, 16), v).unwrap();
        let wm = Array2::from_shape_vec((3, 16), w).unwrap();
        let a = head::cosine_logits(f.view(), wm.view(), 20.0);
        let b = head::cosine_logits((&f * alpha).view(), wm.view(), 20.0);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-5);
            prop_assert!(x.abs() <= 20.0);
        }
    }
}
