use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint label space: base ways `0..B`, background at `B`, novel ways `B+1..B+1+N`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct ClassVocabulary {
    base_classes: Vec<String>,
    novel_classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    base_classes: Vec<String>,
    novel_classes: Vec<String>,
    background_index: usize,
}

impl TryFrom<VocabularyRepr> for ClassVocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        let vocab = ClassVocabulary::new(repr.base_classes, repr.novel_classes)?;
        if vocab.background_index() != repr.background_index {
            return Err(Error::Config(format!(
                "background index {} does not match {} base classes",
                repr.background_index,
                vocab.num_base()
            )));
        }
        Ok(vocab)
    }
}

impl From<ClassVocabulary> for VocabularyRepr {
    fn from(v: ClassVocabulary) -> Self {
        let background_index = v.background_index();
        VocabularyRepr {
            base_classes: v.base_classes,
            novel_classes: v.novel_classes,
            background_index,
        }
    }
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(
        base: impl IntoIterator<Item = S>,
        novel: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let base_classes: Vec<String> = base.into_iter().map(Into::into).collect();
        let novel_classes: Vec<String> = novel.into_iter().map(Into::into).collect();
        if base_classes.is_empty() {
            return Err(Error::Config("vocabulary needs at least one base class".into()));
        }
        let mut seen = HashSet::new();
        for name in base_classes.iter().chain(&novel_classes) {
            if name.is_empty() {
                return Err(Error::Config("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("class `{name}` appears more than once")));
            }
        }
        Ok(Self {
            base_classes,
            novel_classes,
        })
    }

    pub fn base_classes(&self) -> &[String] {
        &self.base_classes
    }

    pub fn novel_classes(&self) -> &[String] {
        &self.novel_classes
    }

    pub fn num_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_classes.len()
    }

    pub fn background_index(&self) -> usize {
        self.base_classes.len()
    }

    /// `|base| + 1 + |novel|`.
    pub fn joint_width(&self) -> usize {
        self.num_base() + 1 + self.num_novel()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.base_classes.iter().position(|c| c == name) {
            return Some(i);
        }
        self.novel_classes
            .iter()
            .position(|c| c == name)
            .map(|j| self.num_base() + 1 + j)
    }

    /// Name of a foreground class index; `None` for background or out-of-range.
    pub fn name_of(&self, index: usize) -> Option<&str> {
        let nb = self.num_base();
        if index < nb {
            Some(&self.base_classes[index])
        } else if index > nb && index <= nb + self.num_novel() {
            Some(&self.novel_classes[index - nb - 1])
        } else {
            None
        }
    }

    pub fn is_base(&self, index: usize) -> bool {
        index < self.num_base()
    }

    pub fn is_novel(&self, index: usize) -> bool {
        index > self.num_base() && index < self.joint_width()
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.is_base(index) || self.is_novel(index)
    }

    pub fn base_indices(&self) -> std::ops::Range<usize> {
        0..self.num_base()
    }

    pub fn novel_indices(&self) -> std::ops::Range<usize> {
        self.num_base() + 1..self.joint_width()
    }

    /// Every foreground index in vocabulary order (base first).
    pub fn foreground_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.base_indices().chain(self.novel_indices())
    }

    /// Position of a novel index within the novel head.
    pub fn novel_slot(&self, index: usize) -> Option<usize> {
        self.is_novel(index).then(|| index - self.num_base() - 1)
    }
}
