//! Command-line surface of the `itfa` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use itfa_core::detector::{ClassifierMode, RegressorMode};
use itfa_core::evalmetrics::{EvalMode, EvalReport};
use itfa_core::inference::{detect_with, DetectOptions, RENDER_SCORE_THRESHOLD};
use itfa_core::synthdata::{build_dataset, write_coco_annotations, DatasetSplit};
use itfa_core::training::{
    apply_freeze_policy, audit_frozen, branch_surgery, load_checkpoint, save_checkpoint, Checkpoint, FinetuneLayers,
    FreezePolicy,
};

use crate::ablation::{directionality, run_ablation, AblationGrid, AblationTable, BaseCheckpoints};
use crate::audit::{write_violations, AuditedSplit, Violation};
use crate::config::{EvalOptions, ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::{Error, Result};
use crate::manifest::{read_json, write_json};
use crate::pipeline::{
    base_dir, collect_loss_logs, run_base_training, run_eval, run_finetune_grid, sorted_dirs, RunAudit, ShotSummary,
    AUDIT_FILE, CHECKPOINT_DIR, LOG_FILE, REPORT_FILE,
};
use crate::plots::{emit_plots, PlotInput};
use crate::render::{rasterize, render_detections};

#[derive(Debug, Parser)]
#[command(name = "itfa", version, about = "Incremental few-shot detection experiments on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output root; overrides the config's `output_dir`.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(config.with_output_root(self.output.clone()))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvalModeArg {
    Joint,
    NovelOnly,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::Joint => EvalMode::Joint,
            EvalModeArg::NovelOnly => EvalMode::NovelOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset operations.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Training stages.
    Train {
        #[command(subcommand)]
        action: TrainAction,
    },
    /// Split a base checkpoint into parallel base and novel branches.
    Surgery {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint directory.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<FinetuneLayers>,
        /// Destination checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every (K, seed) cell from a base checkpoint and evaluate jointly.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint directory; defaults to the output root's base run.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<FinetuneLayers>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<EvalModeArg>,
        /// Report destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fine-tuning-layer × regressor × classifier grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `<classifier>_<regressor>` base runs; defaults to `<output>/base`.
        #[arg(long)]
        bases: Option<PathBuf>,
        /// Train any base checkpoint the grid needs but cannot find.
        #[arg(long)]
        train_missing: bool,
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policies: Option<Vec<FinetuneLayers>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_classifier)]
        classifiers: Option<Vec<ClassifierMode>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_regressor)]
        regressors: Option<Vec<RegressorMode>>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Draw detections of one test image to a PNG.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value_t = RENDER_SCORE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit SVG plots from the logs and reports below the output root.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Plot directory; defaults to `<output>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check the freeze and leakage audits of every fine-tune run below the output root.
    Audit {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    /// Generate the splits and write COCO annotations (and optionally PNG images).
    Build {
        #[command(flatten)]
        common: Common,
        /// Destination; defaults to `<output>/dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        images: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainAction {
    /// Train the base-stage detector.
    Base {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_classifier)]
        classifier: Option<ClassifierMode>,
        #[arg(long, value_parser = parse_regressor)]
        regressor: Option<RegressorMode>,
    },
}

fn parse_policy(s: &str) -> std::result::Result<FinetuneLayers, String> {
    s.parse().map_err(|e: itfa_core::Error| e.to_string())
}

fn parse_classifier(s: &str) -> std::result::Result<ClassifierMode, String> {
    match s {
        "linear" => Ok(ClassifierMode::Linear),
        "cosine" => Ok(ClassifierMode::Cosine),
        _ => Err(format!("unknown classifier {s:?} (linear|cosine)")),
    }
}

fn parse_regressor(s: &str) -> std::result::Result<RegressorMode, String> {
    match s {
        "agnostic" => Ok(RegressorMode::Agnostic),
        "specific" => Ok(RegressorMode::Specific),
        _ => Err(format!("unknown regressor {s:?} (agnostic|specific)")),
    }
}

fn dataset(config: &ExperimentConfig) -> Result<AuditedSplit> {
    Ok(AuditedSplit::new(build_dataset(&config.dataset_config()?)?))
}

fn load_for(config: &ExperimentConfig, dir: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(&dir.join(CHECKPOINT_DIR)).or_else(|_| load_checkpoint(dir))?;
    let vocab = config.dataset_config()?.vocabulary()?;
    if ckpt.vocabulary != vocab {
        return Err(Error::Config(format!("checkpoint at {} was trained on another vocabulary", dir.display())));
    }
    Ok(ckpt)
}

/// Executes one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { action: DatasetAction::Build { common, out, images } } => {
            let config = common.load()?;
            let split = build_dataset(&config.dataset_config()?)?;
            let dir = out.unwrap_or_else(|| config.output_dir.join("dataset"));
            write_dataset(&split, &dir, images)?;
            std::fs::write(dir.join("dataset.toml"), toml::to_string_pretty(&config.dataset_config()?).map_err(|e| Error::Config(e.to_string()))?)
                .map_err(|e| Error::io(&dir, e))?;
            println!(
                "dataset: {} base_train, {} novel_pool, {} test images -> {}",
                split.base_train.len(),
                split.novel_pool.len(),
                split.test.len(),
                dir.display()
            );
        }
        Command::Train { action: TrainAction::Base { common, classifier, regressor } } => {
            let mut config = common.load()?;
            if let Some(c) = classifier {
                config.detector.classifier = c;
            }
            if let Some(r) = regressor {
                config.detector.regressor = r;
            }
            let data = dataset(&config)?;
            let dir = base_dir(&config.output_dir, config.detector.classifier, config.detector.regressor);
            let run = run_base_training(&config, &data, Some(&dir))?;
            println!(
                "base: {} steps, bAP {:.3} bAP50 {:.3} (untrained bAP50 {:.3}) -> {}",
                run.log.len(),
                run.report.bap.unwrap_or(f64::NAN),
                run.report.bap50.unwrap_or(f64::NAN),
                run.initial_report.bap50.unwrap_or(f64::NAN),
                dir.display()
            );
        }
        Command::Surgery { common, base, seed, policy, out } => {
            let config = common.load()?;
            let base = load_for(&config, &base)?;
            let mut ckpt = branch_surgery(&base, &base.vocabulary, seed)?;
            apply_freeze_policy(&mut ckpt, FreezePolicy::new(policy.unwrap_or(config.policy)))?;
            save_checkpoint(&ckpt, &out)?;
            println!("surgery: seed {seed} -> {}", out.display());
        }
        Command::Finetune { common, base, shots, seeds, policy } => {
            let mut config = common.load()?;
            config.shots = shots.unwrap_or(config.shots);
            config.seeds = seeds.unwrap_or(config.seeds);
            config.policy = policy.unwrap_or(config.policy);
            config.validate()?;
            let data = dataset(&config)?;
            let base_path =
                base.unwrap_or_else(|| base_dir(&config.output_dir, config.detector.classifier, config.detector.regressor));
            let base = load_for(&config, &base_path)?;
            let outcome = run_finetune_grid(&config, &data, &base, Some(&config.output_dir))?;
            for s in &outcome.summaries {
                println!("{}", summary_line(&format!("K={} {}", s.shots, s.policy), &s.report));
            }
            let violations = outcome.violations();
            if !violations.is_empty() {
                return Err(Error::Audit(violations));
            }
        }
        Command::Eval { common, checkpoint, mode, out } => {
            let mut config = common.load()?;
            if let Some(m) = mode {
                config.eval.mode = m.into();
            }
            let ckpt = load_for(&config, &checkpoint)?;
            let data = dataset(&config)?;
            let mut report = run_eval(&ckpt, data.test(), &EvalOptions { mode: config.eval.mode })?;
            report.note = config.domain_note()?;
            match out {
                Some(p) => {
                    write_json(&p, &report)?;
                    println!("{}", summary_line(&config.eval.mode.to_string(), &report));
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Ablate { common, bases, train_missing, policies, classifiers, regressors, shots, seeds } => {
            let config = common.load()?;
            let full = AblationGrid::full(&config);
            let grid = AblationGrid {
                policies: policies.unwrap_or(full.policies),
                classifiers: classifiers.unwrap_or(full.classifiers),
                regressors: regressors.unwrap_or(full.regressors),
                shots: shots.unwrap_or(full.shots),
                seeds: seeds.unwrap_or(full.seeds),
            };
            let data = dataset(&config)?;
            let bases_root = bases.unwrap_or_else(|| config.output_dir.clone());
            let checkpoints = gather_bases(&config, &data, &bases_root, &grid, train_missing)?;
            let table = run_ablation(&config, &data, &checkpoints, &grid)?;
            write_ablation(&config.output_dir, &table)?;
            print!("{}", table.to_markdown());
            for (c, r) in grid.base_modes() {
                for &k in &grid.shots {
                    if let Some(d) = directionality(&table, k, c, r) {
                        println!(
                            "directionality {c}/{r} K={k}: fc2 {:.4} vs none {:.4} (diff {:+.4}, se {:.4}) {}",
                            d.fc2_mean, d.none_mean, d.mean_difference, d.paired_std_error, d.verdict
                        );
                    }
                }
            }
            if !table.violations.is_empty() {
                write_violations(&config.output_dir.join("ablation"), &table.violations)?;
                return Err(Error::Audit(table.violations));
            }
        }
        Command::Render { common, checkpoint, image, threshold, out } => {
            let config = common.load()?;
            let ckpt = load_for(&config, &checkpoint)?;
            let data = dataset(&config)?;
            let test = data.test();
            let img = test
                .get(image)
                .ok_or_else(|| itfa_core::Error::Argument(format!("test split has {} images, index {image} requested", test.len())))?;
            let opts = DetectOptions::from_config(&ckpt.config).with_threshold(threshold);
            let dets = detect_with(img, &ckpt, &ckpt.vocabulary, opts)?;
            render_detections(img, &dets, &ckpt.vocabulary, &out)?;
            println!("render: {} detections -> {}", dets.len(), out.display());
        }
        Command::Plot { common, out } => {
            let config = common.load()?;
            let input = collect_plot_input(&config.output_dir)?;
            let dir = out.unwrap_or_else(|| config.output_dir.join("plots"));
            for p in emit_plots(&input, &dir)? {
                println!("plot: {}", p.display());
            }
        }
        Command::Audit { common } => {
            let config = common.load()?;
            let violations = audit_runs(&config.output_dir)?;
            if !violations.is_empty() {
                write_violations(&config.output_dir, &violations)?;
                return Err(Error::Audit(violations));
            }
            println!("audit: all fine-tune runs below {} pass", config.output_dir.display());
        }
    }
    Ok(())
}

fn summary_line(label: &str, r: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    format!(
        "{label}: bAP {} nAP {} hAP {} | bAP50 {} nAP50 {} hAP50 {}",
        f(r.bap),
        f(r.nap),
        f(r.hap),
        f(r.bap50),
        f(r.nap50),
        f(r.hap50)
    )
}

fn write_dataset(split: &DatasetSplit, dir: &Path, images: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, imgs) in [("base_train", &split.base_train), ("novel_pool", &split.novel_pool), ("test", &split.test)] {
        write_coco_annotations(imgs.iter(), &split.vocabulary, &dir.join(format!("{name}.json")))?;
        if images {
            let sub = dir.join("images").join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for img in imgs {
                let p = sub.join(format!("{:08}.png", img.image_id));
                rasterize(img, 1).save(&p)?;
            }
        }
    }
    Ok(())
}

fn gather_bases(
    config: &ExperimentConfig,
    data: &AuditedSplit,
    root: &Path,
    grid: &AblationGrid,
    train_missing: bool,
) -> Result<BaseCheckpoints> {
    let mut out = BaseCheckpoints::new();
    for (classifier, regressor) in grid.base_modes() {
        let dir = base_dir(root, classifier, regressor);
        let ckpt = if dir.join(CHECKPOINT_DIR).is_dir() {
            load_for(config, &dir)?
        } else if train_missing {
            let mut c = config.clone();
            c.detector.classifier = classifier;
            c.detector.regressor = regressor;
            run_base_training(&c, data, Some(&dir))?.checkpoint
        } else {
            return Err(Error::MissingBase { classifier, regressor });
        };
        out.insert((classifier, regressor), ckpt);
    }
    Ok(out)
}

fn write_ablation(root: &Path, table: &AblationTable) -> Result<()> {
    let dir = root.join("ablation");
    write_json(&dir.join("ablation.json"), table)?;
    std::fs::write(dir.join("ablation.md"), table.to_markdown()).map_err(|e| Error::io(&dir, e))
}

/// Loss logs, base and per-K summary reports, and the ablation table found below `root`.
pub fn collect_plot_input(root: &Path) -> Result<PlotInput> {
    let mut input = PlotInput {
        loss_logs: collect_loss_logs(root)?,
        ..Default::default()
    };
    let base = root.join("base");
    if base.is_dir() {
        for d in sorted_dirs(&base)? {
            let p = d.join(REPORT_FILE);
            if p.is_file() {
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                input.reports.push((format!("base {name}"), read_json(&p)?));
            }
        }
    }
    let ft = root.join("finetune");
    if ft.is_dir() {
        let mut by_k: BTreeMap<usize, PathBuf> = BTreeMap::new();
        for d in sorted_dirs(&ft)? {
            if let Some(k) = d.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix('k')).and_then(|n| n.parse().ok()) {
                by_k.insert(k, d);
            }
        }
        for (k, d) in by_k {
            let mut names: Vec<PathBuf> = std::fs::read_dir(&d)
                .map_err(|e| Error::io(&d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("summary_")))
                .collect();
            names.sort();
            for p in names {
                let s: ShotSummary = read_json(&p)?;
                input.reports.push((format!("K={k} {}", s.policy), s.report));
            }
            if let Some(seed_dir) = sorted_dirs(&d)?.into_iter().next() {
                for cell in sorted_dirs(&seed_dir)? {
                    let p = cell.join(LOG_FILE);
                    if p.is_file() {
                        let losses: Vec<f64> = read_json(&p)?;
                        let label = format!(
                            "finetune k{k} {} {}",
                            seed_dir.file_name().unwrap_or_default().to_string_lossy(),
                            cell.file_name().unwrap_or_default().to_string_lossy()
                        );
                        input.loss_logs.insert(label, losses.into_iter().enumerate().collect());
                    }
                }
            }
        }
    }
    let ab = root.join("ablation").join("ablation.json");
    if ab.is_file() {
        input.ablation = Some(read_json(&ab)?);
    }
    Ok(input)
}

/// Recomputes the freeze audit of every stored fine-tune run against a fresh surgery of
/// its base checkpoint, and re-reads each run's recorded data accesses.
pub fn audit_runs(root: &Path) -> Result<Vec<Violation>> {
    let ft = root.join("finetune");
    if !ft.is_dir() {
        return Err(itfa_core::Error::Argument(format!("no fine-tune runs below {}", root.display())).into());
    }
    let mut bases: BTreeMap<(ClassifierMode, RegressorMode), Checkpoint> = BTreeMap::new();
    let mut violations = Vec::new();
    for k in sorted_dirs(&ft)? {
        for seed in sorted_dirs(&k)? {
            for cell in sorted_dirs(&seed)? {
                let run = cell.strip_prefix(&ft).unwrap_or(&cell).to_string_lossy().replace('\\', "/");
                let ckpt = load_checkpoint(&cell.join(CHECKPOINT_DIR))?;
                let key = (ckpt.config.classifier, ckpt.config.regressor);
                if !bases.contains_key(&key) {
                    bases.insert(key, load_checkpoint(&base_dir(root, key.0, key.1).join(CHECKPOINT_DIR))?);
                }
                let policy = ckpt
                    .metadata
                    .freeze_policy
                    .ok_or_else(|| itfa_core::Error::Argument(format!("{run}: checkpoint has no freeze policy")))?;
                let surgery_seed = ckpt
                    .metadata
                    .surgery_seed
                    .ok_or_else(|| itfa_core::Error::Argument(format!("{run}: checkpoint has no surgery seed")))?;
                let reference = branch_surgery(&bases[&key], &ckpt.vocabulary, surgery_seed)?;
                let changed = audit_frozen(&reference.params, &ckpt.params, FreezePolicy::new(policy));
                if !changed.is_empty() {
                    violations.push(Violation::Freeze { run: run.clone(), tensors: changed });
                }
                let recorded: RunAudit = read_json(&cell.join(AUDIT_FILE))?;
                if recorded.reads.base_train > 0 {
                    violations.push(Violation::Leakage { run, base_train_reads: recorded.reads.base_train });
                }
            }
        }
    }
    Ok(violations)
}
