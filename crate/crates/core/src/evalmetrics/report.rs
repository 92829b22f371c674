use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ap::{average_precision, harmonic_mean, iou_thresholds};
use crate::error::{Error, Result};
use crate::inference::Detection;
use crate::synthdata::{ClassVocabulary, Instance};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Named class groups (group name → member class names).
pub type Partition = BTreeMap<String, Vec<String>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Joint,
    BaseOnly,
    NovelOnly,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Joint => "joint",
            EvalMode::BaseOnly => "base_only",
            EvalMode::NovelOnly => "novel_only",
        })
    }
}

impl EvalMode {
    fn includes(self, vocab: &ClassVocabulary, class_index: usize) -> bool {
        match self {
            EvalMode::Joint => vocab.is_foreground(class_index),
            EvalMode::BaseOnly => vocab.is_base(class_index),
            EvalMode::NovelOnly => vocab.is_novel(class_index),
        }
    }
}

/// Ground truth and detections for one test image.
#[derive(Clone, Copy, Debug)]
pub struct EvalImage<'a> {
    pub image_id: u64,
    pub ground_truth: &'a [Instance],
    pub detections: &'a [Detection],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_name: String,
    pub class_index: usize,
    pub novel: bool,
    pub num_gt: usize,
    pub num_detections: usize,
    /// Mean over the ten IoU thresholds; `None` when the class is excluded.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    /// AP at each threshold of the IoU grid (empty when excluded).
    pub ap_per_threshold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAp {
    pub members: Vec<String>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub bap: Option<f64>,
    pub nap: Option<f64>,
    pub hap: Option<f64>,
    pub bap50: Option<f64>,
    pub nap50: Option<f64>,
    pub hap50: Option<f64>,
}

/// APs are stored in `[0, 1]`; multiply by 100 for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub per_class: Vec<ClassAp>,
    pub bap: Option<f64>,
    pub nap: Option<f64>,
    pub hap: Option<f64>,
    pub bap50: Option<f64>,
    pub nap50: Option<f64>,
    pub hap50: Option<f64>,
    pub groups: BTreeMap<String, GroupAp>,
    pub seeds: Vec<u64>,
    /// Filled only by [`multi_seed_mean`].
    pub per_seed: Vec<SeedSummary>,
    pub hap_mean_over_seeds: Option<f64>,
    pub hap50_mean_over_seeds: Option<f64>,
    pub note: Option<String>,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassAp> {
        self.per_class.iter().find(|c| c.class_name == name)
    }

    pub fn per_class_ap(&self) -> BTreeMap<String, f64> {
        self.per_class.iter().filter_map(|c| Some((c.class_name.clone(), c.ap?))).collect()
    }

    pub fn per_class_ap50(&self) -> BTreeMap<String, f64> {
        self.per_class.iter().filter_map(|c| Some((c.class_name.clone(), c.ap50?))).collect()
    }

    fn summary(&self, seed: u64) -> SeedSummary {
        SeedSummary {
            seed,
            bap: self.bap,
            nap: self.nap,
            hap: self.hap,
            bap50: self.bap50,
            nap50: self.nap50,
            hap50: self.hap50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    /// `None` for a group with no evaluated members.
    pub groups: BTreeMap<String, Option<f64>>,
    /// Harmonic mean of the designated pair, when both are present.
    pub harmonic: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn harmonic_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(harmonic_mean(a?, b?))
}

/// Group APs as means of member per-class APs. Members missing from `per_class_ap`
/// (excluded classes) are skipped; a group left empty is reported as `None`.
pub fn group_report(
    per_class_ap: &BTreeMap<String, f64>,
    partition: &Partition,
    harmonic_pair: Option<(&str, &str)>,
) -> Result<GroupReport> {
    let mut seen = BTreeSet::new();
    for members in partition.values() {
        for m in members {
            if !seen.insert(m.as_str()) {
                return Err(Error::Argument(format!("class {m:?} appears in more than one group")));
            }
        }
    }
    let groups: BTreeMap<String, Option<f64>> = partition
        .iter()
        .map(|(name, members)| (name.clone(), mean(members.iter().filter_map(|m| per_class_ap.get(m).copied()))))
        .collect();
    let harmonic = match harmonic_pair {
        Some((a, b)) => {
            let get = |k: &str| {
                groups.get(k).copied().ok_or_else(|| Error::Argument(format!("unknown group {k:?}")))
            };
            harmonic_opt(get(a)?, get(b)?)
        }
        None => None,
    };
    Ok(GroupReport { groups, harmonic })
}

struct Scored {
    image: usize,
    det: usize,
    score: f64,
    best_iou: f64,
}

/// Per-class AP over the IoU grid for every class selected by `mode`.
///
/// Detections of one class are ranked across images by score, then by best IoU to a
/// same-class ground truth, then by box coordinates and image id, so equal-score
/// permutations cannot change the result.
pub fn evaluate(
    images: &[EvalImage<'_>],
    vocab: &ClassVocabulary,
    mode: EvalMode,
    partition: &Partition,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Argument("evaluation split contains no images".into()));
    }
    for img in images {
        for inst in img.ground_truth {
            if !vocab.is_foreground(inst.class_index) {
                return Err(Error::Label { label: inst.class_index, ways: vocab.joint_width() });
            }
        }
        for d in img.detections {
            if !vocab.is_foreground(d.class_index) {
                return Err(Error::Label { label: d.class_index, ways: vocab.joint_width() });
            }
        }
    }
    let thresholds = iou_thresholds();
    let mut per_class = Vec::new();
    for class in vocab.foreground_indices().filter(|&c| mode.includes(vocab, c)) {
        let gts: Vec<Vec<_>> = images
            .iter()
            .map(|img| img.ground_truth.iter().filter(|g| g.class_index == class).map(|g| g.bbox).collect())
            .collect();
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let mut scored = Vec::new();
        for (i, img) in images.iter().enumerate() {
            for (j, d) in img.detections.iter().enumerate().filter(|(_, d)| d.class_index == class) {
                let best_iou = gts[i].iter().map(|g| d.bbox.iou(g)).fold(0.0, f64::max);
                scored.push(Scored { image: i, det: j, score: d.score, best_iou });
            }
        }
        scored.sort_by(|a, b| {
            let (da, db) = (&images[a.image].detections[a.det], &images[b.image].detections[b.det]);
            b.score
                .total_cmp(&a.score)
                .then(b.best_iou.total_cmp(&a.best_iou))
                .then_with(|| da.bbox.total_cmp(&db.bbox))
                .then(images[a.image].image_id.cmp(&images[b.image].image_id))
                .then(a.image.cmp(&b.image))
                .then(a.det.cmp(&b.det))
        });
        let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
        let mut excluded = false;
        for &t in &thresholds {
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let labels: Vec<bool> = scored
                .iter()
                .map(|s| {
                    let bbox = images[s.image].detections[s.det].bbox;
                    let mut best: Option<(usize, f64)> = None;
                    for (g, gt) in gts[s.image].iter().enumerate() {
                        if taken[s.image][g] {
                            continue;
                        }
                        let v = bbox.iou(gt);
                        if v >= t && best.is_none_or(|(_, b)| v > b) {
                            best = Some((g, v));
                        }
                    }
                    best.map(|(g, _)| taken[s.image][g] = true).is_some()
                })
                .collect();
            match average_precision(&labels, num_gt) {
                Some(ap) => ap_per_threshold.push(ap),
                None => excluded = true,
            }
        }
        if excluded {
            ap_per_threshold.clear();
        }
        per_class.push(ClassAp {
            class_name: vocab.name_of(class).unwrap_or_default().to_string(),
            class_index: class,
            novel: vocab.is_novel(class),
            num_gt,
            num_detections: scored.len(),
            ap: mean(ap_per_threshold.iter().copied()),
            ap50: ap_per_threshold.first().copied(),
            ap_per_threshold,
        });
    }
    let group_mean = |novel: bool, f: fn(&ClassAp) -> Option<f64>| {
        mean(per_class.iter().filter(|c| c.novel == novel).filter_map(f))
    };
    let (bap, bap50) = if mode == EvalMode::NovelOnly {
        (None, None)
    } else {
        (group_mean(false, |c| c.ap), group_mean(false, |c| c.ap50))
    };
    let (nap, nap50) = if mode == EvalMode::BaseOnly {
        (None, None)
    } else {
        (group_mean(true, |c| c.ap), group_mean(true, |c| c.ap50))
    };
    let mut report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        per_class,
        bap,
        nap,
        hap: harmonic_opt(bap, nap),
        bap50,
        nap50,
        hap50: harmonic_opt(bap50, nap50),
        groups: BTreeMap::new(),
        seeds: Vec::new(),
        per_seed: Vec::new(),
        hap_mean_over_seeds: None,
        hap50_mean_over_seeds: None,
        note: None,
    };
    let ap = group_report(&report.per_class_ap(), partition, None)?;
    let ap50 = group_report(&report.per_class_ap50(), partition, None)?;
    report.groups = partition
        .iter()
        .map(|(name, members)| {
            (name.clone(), GroupAp { members: members.clone(), ap: ap.groups[name], ap50: ap50.groups[name] })
        })
        .collect();
    Ok(report)
}

fn mean_field(reports: &[EvalReport], f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    mean(reports.iter().filter_map(f))
}

/// Arithmetic mean of every AP field across seeds. Harmonic means are recomputed from
/// the averaged bAP/nAP; the mean of the per-seed harmonic means is kept alongside.
pub fn multi_seed_mean(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Aggregation("no reports to aggregate".into()))?;
    let class_key = |r: &EvalReport| r.per_class.iter().map(|c| (c.class_name.clone(), c.class_index)).collect::<Vec<_>>();
    let group_key = |r: &EvalReport| r.groups.iter().map(|(k, g)| (k.clone(), g.members.clone())).collect::<Vec<_>>();
    for r in &reports[1..] {
        if r.mode != first.mode {
            return Err(Error::Aggregation(format!("mixed evaluation modes {} and {}", first.mode, r.mode)));
        }
        if class_key(r) != class_key(first) {
            return Err(Error::Aggregation("reports cover different vocabularies".into()));
        }
        if group_key(r) != group_key(first) {
            return Err(Error::Aggregation("reports use different partitions".into()));
        }
    }
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n_thr = reports.iter().map(|r| r.per_class[i].ap_per_threshold.len()).max().unwrap_or(0);
            let ap_per_threshold = (0..n_thr)
                .map(|t| mean(reports.iter().filter_map(|r| r.per_class[i].ap_per_threshold.get(t).copied())).unwrap_or(0.0))
                .collect();
            ClassAp {
                class_name: c.class_name.clone(),
                class_index: c.class_index,
                novel: c.novel,
                num_gt: c.num_gt,
                num_detections: c.num_detections,
                ap: mean_field(reports, |r| r.per_class[i].ap),
                ap50: mean_field(reports, |r| r.per_class[i].ap50),
                ap_per_threshold,
            }
        })
        .collect();
    let groups = first
        .groups
        .iter()
        .map(|(k, g)| {
            (
                k.clone(),
                GroupAp {
                    members: g.members.clone(),
                    ap: mean_field(reports, |r| r.groups[k].ap),
                    ap50: mean_field(reports, |r| r.groups[k].ap50),
                },
            )
        })
        .collect();
    let mut seeds = Vec::new();
    let mut per_seed = Vec::new();
    for r in reports {
        if r.per_seed.is_empty() {
            let seed = r.seeds.first().copied().unwrap_or(per_seed.len() as u64);
            per_seed.push(r.summary(seed));
        } else {
            per_seed.extend(r.per_seed.iter().cloned());
        }
        seeds.extend(r.seeds.iter().copied());
    }
    let bap = mean_field(reports, |r| r.bap);
    let nap = mean_field(reports, |r| r.nap);
    let bap50 = mean_field(reports, |r| r.bap50);
    let nap50 = mean_field(reports, |r| r.nap50);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: first.mode,
        per_class,
        bap,
        nap,
        hap: harmonic_opt(bap, nap),
        bap50,
        nap50,
        hap50: harmonic_opt(bap50, nap50),
        groups,
        seeds,
        hap_mean_over_seeds: mean(per_seed.iter().filter_map(|s| s.hap)),
        hap50_mean_over_seeds: mean(per_seed.iter().filter_map(|s| s.hap50)),
        per_seed,
        note: first.note.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::new(["circle", "square"], ["diamond"]).unwrap()
    }

    fn gt(class_index: usize, b: [f64; 4]) -> Instance {
        Instance { class_index, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
    }

    fn det(class_index: usize, b: [f64; 4], score: f64) -> Detection {
        Detection { class_index, bbox: BBox::new(b[0], b[1], b[2], b[3]), score }
    }

    fn report(dets: &[Detection], mode: EvalMode) -> EvalReport {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0]), gt(1, [20.0, 20.0, 30.0, 30.0]), gt(3, [40.0, 40.0, 50.0, 50.0])];
        let imgs = [EvalImage { image_id: 1, ground_truth: &g, detections: dets }];
        evaluate(&imgs, &vocab(), mode, &Partition::new()).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let d = [det(0, [0.0, 0.0, 10.0, 10.0], 0.9), det(1, [20.0, 20.0, 30.0, 30.0], 0.8), det(3, [40.0, 40.0, 50.0, 50.0], 0.7)];
        let r = report(&d, EvalMode::Joint);
        assert_eq!(r.bap, Some(1.0));
        assert_eq!(r.nap, Some(1.0));
        assert_eq!(r.hap, Some(1.0));
    }

    #[test]
    fn missing_novel_head_gives_zero_nap() {
        let d = [det(0, [0.0, 0.0, 10.0, 10.0], 0.9)];
        let r = report(&d, EvalMode::Joint);
        assert_eq!(r.nap, Some(0.0));
        assert_eq!(r.hap, Some(0.0));
        assert_eq!(r.bap, Some(0.5));
    }

    #[test]
    fn novel_only_has_no_base_entries() {
        let d = [det(0, [0.0, 0.0, 10.0, 10.0], 0.9), det(3, [40.0, 40.0, 50.0, 50.0], 0.7)];
        let r = report(&d, EvalMode::NovelOnly);
        assert!(r.per_class.iter().all(|c| c.novel));
        assert_eq!(r.bap, None);
        assert_eq!(r.hap, None);
        assert_eq!(r.nap, Some(1.0));
    }

    #[test]
    fn loose_box_counts_only_at_low_thresholds() {
        // IoU = 80 / 100 = 0.8: a hit for thresholds 0.50..=0.80 (7 of 10).
        let d = [det(3, [40.0, 40.0, 50.0, 48.0], 0.7)];
        let r = report(&d, EvalMode::NovelOnly);
        let c = r.class("diamond").unwrap();
        assert_eq!(c.ap50, Some(1.0));
        assert!((c.ap.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_gt_class_is_excluded() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let d = [det(0, [0.0, 0.0, 10.0, 10.0], 0.9)];
        let imgs = [EvalImage { image_id: 1, ground_truth: &g, detections: &d }];
        let r = evaluate(&imgs, &vocab(), EvalMode::BaseOnly, &Partition::new()).unwrap();
        assert_eq!(r.class("square").unwrap().ap, None);
        assert_eq!(r.bap, Some(1.0));
    }

    #[test]
    fn equal_score_permutation_invariant() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let a = det(0, [0.0, 0.0, 10.0, 10.0], 0.5);
        let b = det(0, [1.0, 0.0, 11.0, 10.0], 0.5);
        let r1 = {
            let d = [a, b];
            evaluate(&[EvalImage { image_id: 1, ground_truth: &g, detections: &d }], &vocab(), EvalMode::BaseOnly, &Partition::new()).unwrap()
        };
        let r2 = {
            let d = [b, a];
            evaluate(&[EvalImage { image_id: 1, ground_truth: &g, detections: &d }], &vocab(), EvalMode::BaseOnly, &Partition::new()).unwrap()
        };
        assert_eq!(r1.bap, r2.bap);
        assert_eq!(r1.bap, Some(1.0));
    }

    #[test]
    fn groups_and_absent_groups() {
        let mut aps = BTreeMap::new();
        aps.insert("a".to_string(), 0.4);
        aps.insert("b".to_string(), 0.2);
        aps.insert("c".to_string(), 0.1);
        let mut p = Partition::new();
        p.insert("rare".into(), vec!["a".into(), "b".into()]);
        p.insert("frequent".into(), vec!["c".into()]);
        p.insert("empty".into(), vec!["zzz".into()]);
        let g = group_report(&aps, &p, Some(("rare", "frequent"))).unwrap();
        assert!((g.groups["rare"].unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(g.groups["empty"], None);
        assert!((g.harmonic.unwrap() - 2.0 * 0.3 * 0.1 / 0.4).abs() < 1e-12);
        p.insert("dup".into(), vec!["a".into()]);
        assert!(group_report(&aps, &p, None).is_err());
    }

    fn with(bap: f64, nap: f64, seed: u64) -> EvalReport {
        let mut r = report(&[], EvalMode::Joint);
        r.bap = Some(bap);
        r.nap = Some(nap);
        r.hap = Some(harmonic_mean(bap, nap));
        r.seeds = vec![seed];
        r
    }

    #[test]
    fn seed_mean_and_harmonic_variants() {
        let m = multi_seed_mean(&[with(0.4, 0.04, 0), with(0.2, 0.06, 1)]).unwrap();
        assert!((m.nap.unwrap() - 0.05).abs() < 1e-12);
        assert!((m.bap.unwrap() - 0.3).abs() < 1e-12);
        let of_means = 2.0 * 0.3 * 0.05 / 0.35;
        let means_of = (2.0 * 0.4 * 0.04 / 0.44 + 2.0 * 0.2 * 0.06 / 0.26) / 2.0;
        assert!((m.hap.unwrap() - of_means).abs() < 1e-12);
        assert!((m.hap_mean_over_seeds.unwrap() - means_of).abs() < 1e-12);
        assert!((of_means - means_of).abs() > 1e-4);
        assert_eq!(m.seeds, vec![0, 1]);
        assert_eq!(m.per_seed.len(), 2);
    }

    #[test]
    fn identical_reports_mean_to_themselves() {
        let r = with(0.3, 0.1, 5);
        let m = multi_seed_mean(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(m.bap, r.bap);
        assert_eq!(m.nap, r.nap);
        assert_eq!(m.hap, r.hap);
    }

    #[test]
    fn mismatched_vocabularies_rejected() {
        let a = with(0.3, 0.1, 0);
        let mut b = with(0.3, 0.1, 1);
        b.per_class[0].class_name = "other".into();
        assert!(matches!(multi_seed_mean(&[a, b]), Err(Error::Aggregation(_))));
    }
}
