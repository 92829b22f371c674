//! The two-stage pipeline: base training, surgery plus fine-tuning, evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use itfa_core::detector::{ClassifierMode, RegressorMode, Stage};
use itfa_core::evalmetrics::{evaluate, multi_seed_mean, EvalImage, EvalMode, EvalReport, Partition};
use itfa_core::inference::{detect, Detection};
use itfa_core::synthdata::{sample_support_set, AnnotatedImage, Instance};
use itfa_core::training::{
    apply_freeze_policy, audit_frozen, branch_surgery, finetune, prepare_support, save_checkpoint, train_base,
    Checkpoint, FinetuneLayers, FreezePolicy, LossBreakdown, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::audit::{write_violations, AccessLog, AuditedSplit, Violation};
use crate::config::{EvalOptions, ExperimentConfig};
use crate::error::{Error, Result};
use crate::manifest::{write_json, RunManifest};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "log.json";
pub const AUDIT_FILE: &str = "audit.json";

/// `<root>/base/<classifier>_<regressor>`.
pub fn base_dir(root: &Path, classifier: ClassifierMode, regressor: RegressorMode) -> PathBuf {
    root.join("base").join(format!("{classifier}_{regressor}"))
}

/// `<root>/finetune/k<K>/seed<S>/<policy>`.
pub fn cell_dir(root: &Path, k: usize, seed: u64, policy: FinetuneLayers) -> PathBuf {
    root.join("finetune").join(format!("k{k}")).join(format!("seed{seed}")).join(policy.to_string())
}

pub fn cell_name(k: usize, seed: u64, policy: FinetuneLayers) -> String {
    format!("k{k}/seed{seed}/{policy}")
}

/// Runs the checkpoint over `images` with its configured inference options.
pub fn detect_all(ckpt: &Checkpoint, images: &[AnnotatedImage]) -> Result<Vec<Vec<Detection>>> {
    images.iter().map(|im| Ok(detect(im, ckpt, &ckpt.vocabulary)?)).collect()
}

/// Evaluates `ckpt` on `images`. Novel-only mode drops base-class ground truth and
/// detections before matching.
pub fn run_eval(ckpt: &Checkpoint, images: &[AnnotatedImage], options: &EvalOptions) -> Result<EvalReport> {
    evaluate_as(ckpt, images, options.mode)
}

pub(crate) fn evaluate_as(ckpt: &Checkpoint, images: &[AnnotatedImage], mode: EvalMode) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(itfa_core::Error::Argument("evaluation split contains no images".into()).into());
    }
    let vocab = &ckpt.vocabulary;
    let keep = |c: usize| match mode {
        EvalMode::NovelOnly => vocab.is_novel(c),
        EvalMode::BaseOnly => vocab.is_base(c),
        EvalMode::Joint => true,
    };
    let dets = detect_all(ckpt, images)?;
    let gts: Vec<Vec<Instance>> = images
        .iter()
        .map(|im| im.instances.iter().filter(|i| keep(i.class_index)).copied().collect())
        .collect();
    let dets: Vec<Vec<Detection>> = dets
        .into_iter()
        .map(|d| d.into_iter().filter(|d| keep(d.class_index)).collect())
        .collect();
    let eval_images: Vec<EvalImage<'_>> = images
        .iter()
        .zip(gts.iter().zip(&dets))
        .map(|(im, (g, d))| EvalImage {
            image_id: im.image_id,
            ground_truth: g,
            detections: d,
        })
        .collect();
    Ok(evaluate(&eval_images, vocab, mode, &Partition::new())?)
}

#[derive(Clone, Debug)]
pub struct BaseRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossBreakdown>,
    /// Base-only evaluation of the untrained checkpoint.
    pub initial_report: EvalReport,
    pub report: EvalReport,
    pub dir: Option<PathBuf>,
}

/// Trains a base-stage detector on `base_train` and evaluates it base-only on the test
/// split. With `out`, writes checkpoint, log, reports and a manifest there. A non-finite
/// loss aborts training; the checkpoint from the last finite step is saved first.
pub fn run_base_training(config: &ExperimentConfig, data: &AuditedSplit, out: Option<&Path>) -> Result<BaseRun> {
    let vocab = data.vocabulary().clone();
    let mut ckpt = Checkpoint::init_base(config.detector.clone(), vocab, config.base.seed)?;
    let initial_report = evaluate_as(&ckpt, data.test(), EvalMode::BaseOnly)?;
    let mut trainer = Trainer::new(config.base.clone())?;
    let images = data.base_train();
    let log = match train_base(&mut ckpt, images, &mut trainer, |_| {}) {
        Ok(log) => log,
        Err(source @ itfa_core::Error::NonFiniteLoss { .. }) => {
            let dir = out.map(|d| d.join(CHECKPOINT_DIR)).unwrap_or_default();
            if out.is_some() {
                save_checkpoint(&ckpt, &dir)?;
            }
            return Err(Error::Diverged {
                step: trainer.step,
                checkpoint: dir,
                source,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let report = evaluate_as(&ckpt, data.test(), EvalMode::BaseOnly)?;
    if let Some(dir) = out {
        save_checkpoint(&ckpt, &dir.join(CHECKPOINT_DIR))?;
        write_json(&dir.join(LOG_FILE), &log)?;
        write_json(&dir.join("report_initial.json"), &initial_report)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        RunManifest::new("base", config.digest()?, ckpt.metadata.config_digest.clone()).write(dir)?;
    }
    Ok(BaseRun {
        checkpoint: ckpt,
        log,
        initial_report,
        report,
        dir: out.map(Path::to_path_buf),
    })
}

/// Outcome of the freeze and leakage audits of one fine-tune run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAudit {
    pub run: String,
    pub frozen_tensors_changed: Vec<String>,
    pub reads: AccessLog,
    pub violations: Vec<Violation>,
}

impl RunAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub shots: usize,
    pub seed: u64,
    pub policy: FinetuneLayers,
    /// Post-surgery checkpoint with the freeze policy applied, before any update.
    pub branched: Checkpoint,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub report: EvalReport,
    pub audit: RunAudit,
}

/// Surgery, freeze, K-shot sampling, fine-tuning and evaluation for one cell. The
/// support set is drawn before any training, so an infeasible K fails early. Reads of
/// `data` are tallied; any base-training read becomes a leakage violation.
pub fn run_finetune(
    config: &ExperimentConfig,
    data: &AuditedSplit,
    base: &Checkpoint,
    k: usize,
    seed: u64,
    policy: FinetuneLayers,
) -> Result<FinetuneRun> {
    base.params.require_stage(Stage::Base)?;
    if &base.vocabulary != data.vocabulary() {
        return Err(Error::Config("base checkpoint vocabulary differs from the dataset".into()));
    }
    let before = data.access_log();
    let support = sample_support_set(data.novel_pool(), k, seed, data.vocabulary())?;

    let mut ckpt = branch_surgery(base, data.vocabulary(), seed)?;
    let freeze = FreezePolicy::new(policy);
    apply_freeze_policy(&mut ckpt, freeze)?;
    ckpt.metadata.shots = Some(k);
    ckpt.metadata.support_seed = Some(seed);
    ckpt.metadata.seed = seed;
    let branched = ckpt.clone();

    let ft = itfa_core::training::TrainConfig {
        seed,
        ..config.finetune.clone()
    };
    let samples = prepare_support(&ckpt, &support.items, &ft.sampling)?;
    let mut trainer = Trainer::new(ft)?;
    let losses = finetune(&mut ckpt, &samples, &mut trainer)?;
    ckpt.metadata.step = trainer.step;

    let mut report = evaluate_as(&ckpt, data.test(), config.eval.mode)?;
    report.seeds = vec![seed];
    report.note = config.domain_note()?;

    let run = cell_name(k, seed, policy);
    let frozen = audit_frozen(&branched.params, &ckpt.params, freeze);
    let reads = data.access_log().since(&before);
    let mut violations = Vec::new();
    if !frozen.is_empty() {
        violations.push(Violation::Freeze {
            run: run.clone(),
            tensors: frozen.clone(),
        });
    }
    if reads.base_train > 0 {
        violations.push(Violation::Leakage {
            run: run.clone(),
            base_train_reads: reads.base_train,
        });
    }
    Ok(FinetuneRun {
        shots: k,
        seed,
        policy,
        branched,
        checkpoint: ckpt,
        losses,
        report,
        audit: RunAudit {
            run,
            frozen_tensors_changed: frozen,
            reads,
            violations,
        },
    })
}

/// Writes one cell's checkpoint, losses, report, audit and manifest.
pub fn write_finetune_run(root: &Path, config: &ExperimentConfig, run: &FinetuneRun) -> Result<PathBuf> {
    let dir = cell_dir(root, run.shots, run.seed, run.policy);
    save_checkpoint(&run.checkpoint, &dir.join(CHECKPOINT_DIR))?;
    write_json(&dir.join(LOG_FILE), &run.losses)?;
    write_json(&dir.join(REPORT_FILE), &run.report)?;
    write_json(&dir.join(AUDIT_FILE), &run.audit)?;
    if !run.audit.passed() {
        write_violations(&dir, &run.audit.violations)?;
    }
    let mut manifest = RunManifest::new("finetune", config.digest()?, run.checkpoint.metadata.config_digest.clone());
    manifest.shots = Some(run.shots);
    manifest.seed = Some(run.seed);
    manifest.policy = Some(run.policy.to_string());
    manifest.write(&dir)?;
    Ok(dir)
}

/// Multi-seed summary for one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub policy: FinetuneLayers,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub summaries: Vec<ShotSummary>,
    pub audits: Vec<RunAudit>,
}

impl GridOutcome {
    pub fn violations(&self) -> Vec<Violation> {
        self.audits.iter().flat_map(|a| a.violations.iter().cloned()).collect()
    }
}

/// Every configured (K, seed) cell under the configured policy, with per-K seed means.
/// With `out`, each cell is written below it and the summaries go to
/// `<out>/finetune/k<K>/summary_<policy>.json`.
pub fn run_finetune_grid(
    config: &ExperimentConfig,
    data: &AuditedSplit,
    base: &Checkpoint,
    out: Option<&Path>,
) -> Result<GridOutcome> {
    let mut summaries = Vec::new();
    let mut audits = Vec::new();
    for &k in &config.shots {
        let mut reports = Vec::new();
        for &seed in &config.seeds {
            let run = run_finetune(config, data, base, k, seed, config.policy)?;
            if let Some(root) = out {
                write_finetune_run(root, config, &run)?;
            }
            reports.push(run.report);
            audits.push(run.audit);
        }
        let summary = ShotSummary {
            shots: k,
            policy: config.policy,
            report: multi_seed_mean(&reports)?,
        };
        if let Some(root) = out {
            write_json(
                &root.join("finetune").join(format!("k{k}")).join(format!("summary_{}.json", config.policy)),
                &summary,
            )?;
        }
        summaries.push(summary);
    }
    let outcome = GridOutcome { summaries, audits };
    let violations = outcome.violations();
    if let (Some(root), false) = (out, violations.is_empty()) {
        write_violations(root, &violations)?;
    }
    Ok(outcome)
}

/// Per-stage loss curves of a run directory tree, keyed by stage label.
pub fn collect_loss_logs(root: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let mut out = BTreeMap::new();
    let base = root.join("base");
    if base.is_dir() {
        for entry in sorted_dirs(&base)? {
            let path = entry.join(LOG_FILE);
            if path.is_file() {
                let log: Vec<LossBreakdown> = crate::manifest::read_json(&path)?;
                let name = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.insert(format!("base {name}"), log.iter().map(|l| (l.step, l.total)).collect());
            }
        }
    }
    Ok(out)
}

pub(crate) fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}
