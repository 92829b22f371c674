//! Fine-tuning-layer × regressor × classifier ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use itfa_core::detector::{ClassifierMode, RegressorMode};
use itfa_core::training::{Checkpoint, FinetuneLayers};
use serde::{Deserialize, Serialize};

use crate::audit::{AuditedSplit, Violation};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::run_finetune;

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

/// Base checkpoints keyed by the detector head modes they were trained with.
pub type BaseCheckpoints = BTreeMap<(ClassifierMode, RegressorMode), Checkpoint>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub policies: Vec<FinetuneLayers>,
    pub classifiers: Vec<ClassifierMode>,
    pub regressors: Vec<RegressorMode>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// All three policies and both modes of each head, with the config's shots and seeds.
    pub fn full(config: &ExperimentConfig) -> Self {
        Self {
            policies: FinetuneLayers::ALL.to_vec(),
            classifiers: vec![ClassifierMode::Linear, ClassifierMode::Cosine],
            regressors: vec![RegressorMode::Agnostic, RegressorMode::Specific],
            shots: config.shots.clone(),
            seeds: config.seeds.clone(),
        }
    }

    pub fn base_modes(&self) -> Vec<(ClassifierMode, RegressorMode)> {
        let mut v = Vec::new();
        for &r in &self.regressors {
            for &c in &self.classifiers {
                v.push((c, r));
            }
        }
        v
    }
}

/// nAP of one (row, K) cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// `(seed, nAP)` in seed-list order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by √n; zero for one seed.
    pub std_error: f64,
}

impl CellStats {
    pub fn from_values(per_seed: Vec<(u64, f64)>) -> Self {
        let values: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
        let (mean, std_error) = mean_and_se(&values);
        Self { per_seed, mean, std_error }
    }
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: FinetuneLayers,
    pub regressor: RegressorMode,
    pub classifier: ClassifierMode,
    /// Keyed by K.
    pub cells: BTreeMap<usize, CellStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub violations: Vec<Violation>,
}

impl AblationTable {
    pub fn row(&self, policy: FinetuneLayers, classifier: ClassifierMode, regressor: RegressorMode) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.classifier == classifier && r.regressor == regressor)
    }

    /// Markdown table of mean nAP (×100) ± standard error, one column per K.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| fine-tuned layers | regressor | classifier |");
        for k in &self.shots {
            let _ = write!(s, " {k}-shot nAP |");
        }
        s.push_str("\n|---|---|---|");
        for _ in &self.shots {
            s.push_str("---|");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} | {} | {} |", row.policy, row.regressor, row.classifier);
            for k in &self.shots {
                match row.cells.get(k) {
                    Some(c) => {
                        let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * c.mean, 100.0 * c.std_error);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Every (policy, regressor, classifier) row of the grid, fine-tuned from the matching
/// base checkpoint for each K and seed and scored by joint-evaluation nAP. All required
/// base checkpoints are checked before any cell runs.
pub fn run_ablation(
    config: &ExperimentConfig,
    data: &AuditedSplit,
    bases: &BaseCheckpoints,
    grid: &AblationGrid,
) -> Result<AblationTable> {
    for (classifier, regressor) in grid.base_modes() {
        let base = bases.get(&(classifier, regressor)).ok_or(Error::MissingBase { classifier, regressor })?;
        if base.config.classifier != classifier || base.config.regressor != regressor {
            return Err(Error::Config(format!(
                "checkpoint registered as {classifier}/{regressor} was trained as {}/{}",
                base.config.classifier, base.config.regressor
            )));
        }
    }
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for &policy in &grid.policies {
        for (classifier, regressor) in grid.base_modes() {
            let base = &bases[&(classifier, regressor)];
            let mut cells = BTreeMap::new();
            for &k in &grid.shots {
                let mut per_seed = Vec::with_capacity(grid.seeds.len());
                for &seed in &grid.seeds {
                    let run = run_finetune(config, data, base, k, seed, policy)?;
                    violations.extend(run.audit.violations);
                    per_seed.push((seed, run.report.nap.unwrap_or(f64::NAN)));
                }
                cells.insert(k, CellStats::from_values(per_seed));
            }
            rows.push(AblationRow {
                policy,
                regressor,
                classifier,
                cells,
            });
        }
    }
    Ok(AblationTable {
        schema_version: ABLATION_SCHEMA_VERSION,
        shots: grid.shots.clone(),
        seeds: grid.seeds.clone(),
        rows,
        violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    /// Below the reference but within one standard error.
    Flag,
    Fail,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Flag => "FLAG",
            Verdict::Fail => "FAIL",
        })
    }
}

/// Whether fine-tuning fc2 beats freezing the whole novel extractor at one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directionality {
    pub shots: usize,
    pub classifier: ClassifierMode,
    pub regressor: RegressorMode,
    pub fc2_mean: f64,
    pub none_mean: f64,
    /// Mean over seeds of `nAP(fc2) - nAP(none)`.
    pub mean_difference: f64,
    /// Standard error of the per-seed paired differences.
    pub paired_std_error: f64,
    pub verdict: Verdict,
}

pub fn directionality_verdict(mean_difference: f64, std_error: f64) -> Verdict {
    if mean_difference >= 0.0 {
        Verdict::Pass
    } else if mean_difference >= -std_error {
        Verdict::Flag
    } else {
        Verdict::Fail
    }
}

/// Compares the fc2 and none rows seed by seed. `None` when either row or the K column
/// is missing, or the two cells were run on different seeds.
pub fn directionality(
    table: &AblationTable,
    k: usize,
    classifier: ClassifierMode,
    regressor: RegressorMode,
) -> Option<Directionality> {
    let fc2 = table.row(FinetuneLayers::Fc2, classifier, regressor)?.cells.get(&k)?;
    let none = table.row(FinetuneLayers::None, classifier, regressor)?.cells.get(&k)?;
    paired(fc2, none).map(|(mean_difference, paired_std_error)| Directionality {
        shots: k,
        classifier,
        regressor,
        fc2_mean: fc2.mean,
        none_mean: none.mean,
        mean_difference,
        paired_std_error,
        verdict: directionality_verdict(mean_difference, paired_std_error),
    })
}

/// Mean and standard error of `a - b` over matching seeds.
pub fn paired(a: &CellStats, b: &CellStats) -> Option<(f64, f64)> {
    if a.per_seed.len() != b.per_seed.len() || a.per_seed.is_empty() {
        return None;
    }
    let diffs: Option<Vec<f64>> = a
        .per_seed
        .iter()
        .zip(&b.per_seed)
        .map(|(x, y)| (x.0 == y.0).then_some(x.1 - y.1))
        .collect();
    diffs.map(|d| mean_and_se(&d))
}
