//! End-to-end use of the public API on a tiny detector: base training, surgery, K-shot
//! fine-tuning, checkpoint round trips, inference and evaluation.

use itfa_core::detector::DetectorConfig;
use itfa_core::evalmetrics::{evaluate, EvalImage, EvalMode, Partition};
use itfa_core::inference::detect;
use itfa_core::synthdata::{
    build_dataset, read_coco_annotations, sample_support_set, write_coco_annotations, DatasetConfig, DatasetSplit,
};
use itfa_core::training::{
    apply_freeze_policy, audit_frozen, branch_surgery, finetune, load_checkpoint, prepare_support, save_checkpoint,
    train_base, Checkpoint, FinetuneLayers, FreezePolicy, TrainConfig, Trainer,
};

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: vec![4, 8, 8, 8],
        rpn_channels: 8,
        roi_feature_dim: 16,
        ..Default::default()
    }
}

fn split() -> DatasetSplit {
    build_dataset(&DatasetConfig {
        base_train_images: 16,
        novel_pool_images: 45,
        test_images: 10,
        ..Default::default()
    })
    .unwrap()
}

fn trained_base(data: &DatasetSplit) -> Checkpoint {
    let mut ckpt = Checkpoint::init_base(tiny_config(), data.vocabulary.clone(), 1).unwrap();
    let mut trainer = Trainer::new(TrainConfig { steps: 6, warmup_steps: 2, ..TrainConfig::base() }).unwrap();
    let mut seen = 0;
    let log = train_base(&mut ckpt, &data.base_train, &mut trainer, |_| seen += 1).unwrap();
    assert_eq!((log.len(), seen), (6, 6));
    assert!(log.iter().all(|l| l.total.is_finite()));
    ckpt
}

fn finetuned(data: &DatasetSplit, base: &Checkpoint, seed: u64) -> (Checkpoint, Checkpoint) {
    let mut branched = branch_surgery(base, &data.vocabulary, seed).unwrap();
    let policy = FreezePolicy::new(FinetuneLayers::Fc2);
    apply_freeze_policy(&mut branched, policy).unwrap();
    let support = sample_support_set(&data.novel_pool, 2, seed, &data.vocabulary).unwrap();
    let mut tuned = branched.clone();
    let config = TrainConfig { steps: 5, ..TrainConfig::finetune() };
    let samples = prepare_support(&tuned, &support.items, &config.sampling).unwrap();
    let mut trainer = Trainer::new(config).unwrap();
    let losses = finetune(&mut tuned, &samples, &mut trainer).unwrap();
    assert_eq!(losses.len(), 5);
    assert!(audit_frozen(&branched.params, &tuned.params, policy).is_empty());
    (branched, tuned)
}

#[test]
fn full_pipeline_is_deterministic_and_respects_the_freeze() {
    let data = split();
    let base = trained_base(&data);
    let (_, a) = finetuned(&data, &base, 3);
    let (_, b) = finetuned(&data, &trained_base(&data), 3);
    for name in a.params.names() {
        assert!(a.params.tensor_bits_equal(&b.params, name), "{name}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_every_bit() {
    let data = split();
    let (_, tuned) = finetuned(&data, &trained_base(&data), 0);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&tuned, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.stage(), tuned.stage());
    assert!(tuned.params.names().eq(back.params.names()));
    for name in tuned.params.names() {
        assert!(tuned.params.tensor_bits_equal(&back.params, name), "{name}");
    }
    let img = &data.test[0];
    assert_eq!(detect(img, &tuned, &data.vocabulary).unwrap(), detect(img, &back, &data.vocabulary).unwrap());
}

#[test]
fn detections_evaluate_in_every_mode() {
    let data = split();
    let (_, tuned) = finetuned(&data, &trained_base(&data), 1);
    let dets: Vec<_> = data.test.iter().map(|img| detect(img, &tuned, &data.vocabulary).unwrap()).collect();
    for d in dets.iter().flatten() {
        assert!(data.vocabulary.is_base(d.class_index) || data.vocabulary.is_novel(d.class_index));
        assert!((0.0..=1.0).contains(&d.score));
    }
    let images: Vec<EvalImage> = data
        .test
        .iter()
        .zip(&dets)
        .map(|(img, d)| EvalImage { image_id: img.image_id, ground_truth: &img.instances, detections: d })
        .collect();
    let joint = evaluate(&images, &data.vocabulary, EvalMode::Joint, &Partition::new()).unwrap();
    for v in [joint.bap, joint.nap, joint.bap50, joint.nap50].into_iter().flatten() {
        assert!((0.0..=1.0).contains(&v));
    }
    let novel = evaluate(&images, &data.vocabulary, EvalMode::NovelOnly, &Partition::new()).unwrap();
    assert!(novel.per_class.iter().all(|c| c.novel && data.vocabulary.is_novel(c.class_index)));
}

#[test]
fn coco_annotations_round_trip() {
    let data = split();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.json");
    write_coco_annotations(&data.test, &data.vocabulary, &path).unwrap();
    let records = read_coco_annotations(&path, &data.vocabulary).unwrap();
    assert_eq!(records.len(), data.test.len());
    for (rec, img) in records.iter().zip(&data.test) {
        assert_eq!(rec.image_id, img.image_id);
        assert_eq!(rec.instances.len(), img.instances.len());
        for (a, b) in rec.instances.iter().zip(&img.instances) {
            assert_eq!(a.class_index, b.class_index);
            for (x, y) in a.bbox.to_xywh().iter().zip(b.bbox.to_xywh()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
