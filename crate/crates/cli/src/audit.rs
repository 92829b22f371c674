//! Data-access accounting and invariant violation records.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use itfa_core::synthdata::{AnnotatedImage, ClassVocabulary, DatasetSplit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image reads per split since construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub base_train: usize,
    pub novel_pool: usize,
    pub test: usize,
}

impl AccessLog {
    pub fn since(&self, earlier: &AccessLog) -> AccessLog {
        AccessLog {
            base_train: self.base_train - earlier.base_train,
            novel_pool: self.novel_pool - earlier.novel_pool,
            test: self.test - earlier.test,
        }
    }
}

/// A dataset split whose records can only be reached through counting accessors.
/// Every accessor call counts each image of the returned slice as read.
#[derive(Debug)]
pub struct AuditedSplit {
    split: DatasetSplit,
    base_train: AtomicUsize,
    novel_pool: AtomicUsize,
    test: AtomicUsize,
}

impl AuditedSplit {
    pub fn new(split: DatasetSplit) -> Self {
        Self {
            split,
            base_train: AtomicUsize::new(0),
            novel_pool: AtomicUsize::new(0),
            test: AtomicUsize::new(0),
        }
    }

    pub fn vocabulary(&self) -> &ClassVocabulary {
        &self.split.vocabulary
    }

    pub fn base_train(&self) -> &[AnnotatedImage] {
        self.base_train.fetch_add(self.split.base_train.len(), Ordering::SeqCst);
        &self.split.base_train
    }

    pub fn novel_pool(&self) -> &[AnnotatedImage] {
        self.novel_pool.fetch_add(self.split.novel_pool.len(), Ordering::SeqCst);
        &self.split.novel_pool
    }

    pub fn test(&self) -> &[AnnotatedImage] {
        self.test.fetch_add(self.split.test.len(), Ordering::SeqCst);
        &self.split.test
    }

    /// Split sizes; does not count as a read.
    pub fn sizes(&self) -> AccessLog {
        AccessLog {
            base_train: self.split.base_train.len(),
            novel_pool: self.split.novel_pool.len(),
            test: self.split.test.len(),
        }
    }

    pub fn access_log(&self) -> AccessLog {
        AccessLog {
            base_train: self.base_train.load(Ordering::SeqCst),
            novel_pool: self.novel_pool.load(Ordering::SeqCst),
            test: self.test.load(Ordering::SeqCst),
        }
    }

    pub fn into_inner(self) -> DatasetSplit {
        self.split
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Frozen tensors whose bits changed during fine-tuning.
    Freeze { run: String, tensors: Vec<String> },
    /// Base-training records read during fine-tuning.
    Leakage { run: String, base_train_reads: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Freeze { run, tensors } => write!(f, "{run}: frozen tensors changed: {}", tensors.join(", ")),
            Violation::Leakage { run, base_train_reads } => {
                write!(f, "{run}: {base_train_reads} base_train reads during fine-tuning")
            }
        }
    }
}

/// Machine-readable record written next to a failing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub schema_version: u32,
    pub violations: Vec<Violation>,
}

pub const VIOLATIONS_FILE: &str = "violations.json";

pub fn write_violations(dir: &Path, violations: &[Violation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = ViolationRecord {
        schema_version: 1,
        violations: violations.to_vec(),
    };
    let path = dir.join(VIOLATIONS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use itfa_core::synthdata::{build_dataset, DatasetConfig};

    fn small() -> AuditedSplit {
        AuditedSplit::new(
            build_dataset(&DatasetConfig {
                base_train_images: 4,
                novel_pool_images: 30,
                test_images: 9,
                ..Default::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn counts_reads_per_split() {
        let s = small();
        assert_eq!(s.access_log(), AccessLog::default());
        let _ = s.novel_pool();
        let _ = s.test();
        let _ = s.test();
        assert_eq!(s.access_log(), AccessLog { base_train: 0, novel_pool: 30, test: 18 });
        let before = s.access_log();
        let _ = s.base_train();
        assert_eq!(s.access_log().since(&before).base_train, 4);
    }

    #[test]
    fn sizes_and_vocabulary_are_free() {
        let s = small();
        let _ = s.sizes();
        let _ = s.vocabulary();
        assert_eq!(s.access_log(), AccessLog::default());
    }

    #[test]
    fn violation_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let v = vec![
            Violation::Leakage { run: "k10/seed0/fc2".into(), base_train_reads: 3 },
            Violation::Freeze { run: "k1/seed2/none".into(), tensors: vec!["reg.W".into()] },
        ];
        write_violations(dir.path(), &v).unwrap();
        let text = std::fs::read_to_string(dir.path().join(VIOLATIONS_FILE)).unwrap();
        let back: ViolationRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.violations, v);
        assert!(text.contains("\"kind\": \"leakage\""));
    }
}
