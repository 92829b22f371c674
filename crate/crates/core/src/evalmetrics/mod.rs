//! COCO-style evaluation: greedy matching, 101-point AP over the IoU grid
//! `0.50:0.05:0.95`, base/novel/harmonic aggregation, class groups and seed means.

mod ap;
mod report;

pub use ap::{average_precision, harmonic_mean, iou, iou_thresholds, match_detections};
pub use report::{
    evaluate, group_report, multi_seed_mean, ClassAp, EvalImage, EvalMode, EvalReport, GroupAp, GroupReport,
    Partition, SeedSummary, REPORT_SCHEMA_VERSION,
};
