use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::detector::{Branch, ParameterStore, Stage};
use crate::error::{Error, Result};

/// Which novel-branch RoI layers are fine-tuned alongside the novel classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneLayers {
    None,
    #[default]
    Fc2,
    Fc1Fc2,
}

impl FinetuneLayers {
    pub const ALL: [FinetuneLayers; 3] = [FinetuneLayers::None, FinetuneLayers::Fc2, FinetuneLayers::Fc1Fc2];

    pub fn layers(self) -> &'static [usize] {
        match self {
            FinetuneLayers::None => &[],
            FinetuneLayers::Fc2 => &[2],
            FinetuneLayers::Fc1Fc2 => &[1, 2],
        }
    }
}

impl fmt::Display for FinetuneLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneLayers::None => "none",
            FinetuneLayers::Fc2 => "fc2",
            FinetuneLayers::Fc1Fc2 => "fc1_fc2",
        })
    }
}

impl FromStr for FinetuneLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FinetuneLayers::None),
            "fc2" => Ok(FinetuneLayers::Fc2),
            "fc1_fc2" | "fc1+fc2" => Ok(FinetuneLayers::Fc1Fc2),
            _ => Err(Error::Argument(format!("unknown fine-tune layer selection {s:?}"))),
        }
    }
}

/// The novel classifier is always trainable; backbone, RPN, regressor, base RoI
/// extractor and base classifier are always frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub finetune_layers: FinetuneLayers,
}

impl FreezePolicy {
    pub fn new(finetune_layers: FinetuneLayers) -> Self {
        Self { finetune_layers }
    }

    /// Names that are trainable under this policy, restricted to those present in `params`.
    pub fn trainable_set(&self, params: &ParameterStore) -> BTreeSet<String> {
        let novel = Branch::Novel;
        let mut names = vec![novel.cls_w(), novel.cls_b()];
        for &l in self.finetune_layers.layers() {
            names.push(novel.fc_w(l));
            names.push(novel.fc_b(l));
        }
        names.into_iter().filter(|n| params.contains(n)).collect()
    }
}

pub fn apply_freeze_policy(ckpt: &mut Checkpoint, policy: FreezePolicy) -> Result<()> {
    ckpt.params.require_stage(Stage::Branched)?;
    let trainable = policy.trainable_set(&ckpt.params);
    let names: Vec<String> = ckpt.params.names().map(str::to_string).collect();
    for name in names {
        ckpt.params.set_trainable(&name, trainable.contains(&name))?;
    }
    ckpt.metadata.freeze_policy = Some(policy.finetune_layers);
    Ok(())
}

/// Names of tensors outside the policy's trainable set whose bits differ from `reference`.
pub fn audit_frozen(reference: &ParameterStore, current: &ParameterStore, policy: FreezePolicy) -> Vec<String> {
    let trainable = policy.trainable_set(current);
    let mut violations: Vec<String> = reference
        .names()
        .filter(|n| !trainable.contains(*n) && !current.tensor_bits_equal(reference, n))
        .map(str::to_string)
        .collect();
    violations.extend(current.names().filter(|n| !reference.contains(n)).map(str::to_string));
    violations
}
