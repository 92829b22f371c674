use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ClassifierMode, DetectorConfig, RegressorMode, BACKBONE_BLOCKS};
use crate::error::{Error, Result};
use crate::synthdata::ClassVocabulary;

/// Tensor names shared by the detector, trainer and checkpoint format.
pub mod names {
    pub const RPN_CONV_W: &str = "rpn.conv.W";
    pub const RPN_CONV_B: &str = "rpn.conv.b";
    pub const RPN_OBJ_W: &str = "rpn.obj.W";
    pub const RPN_OBJ_B: &str = "rpn.obj.b";
    pub const RPN_DELTA_W: &str = "rpn.delta.W";
    pub const RPN_DELTA_B: &str = "rpn.delta.b";
    pub const REG_W: &str = "reg.W";
    pub const REG_B: &str = "reg.b";

    pub fn backbone_w(block: usize) -> String {
        format!("backbone.conv{}.W", block + 1)
    }

    pub fn backbone_b(block: usize) -> String {
        format!("backbone.conv{}.b", block + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Branched,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Branched => "branched",
        })
    }
}

/// Parallel RoI feature extractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Base,
    Novel,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Base => "base",
            Branch::Novel => "novel",
        }
    }

    pub fn fc_w(self, layer: usize) -> String {
        format!("roi.{}.fc{layer}.W", self.prefix())
    }

    pub fn fc_b(self, layer: usize) -> String {
        format!("roi.{}.fc{layer}.b", self.prefix())
    }

    pub fn cls_w(self) -> String {
        format!("cls.{}.W", self.prefix())
    }

    pub fn cls_b(self) -> String {
        format!("cls.{}.b", self.prefix())
    }

    pub(crate) fn required_stage(self) -> Stage {
        match self {
            Branch::Base => Stage::Base,
            Branch::Novel => Stage::Branched,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Gradient tensors keyed by parameter name.
pub type Gradients = BTreeMap<String, ArrayD<f64>>;

pub(crate) fn accumulate(grads: &mut Gradients, name: impl Into<String>, g: ArrayD<f64>) {
    use std::collections::btree_map::Entry;
    match grads.entry(name.into()) {
        Entry::Occupied(mut e) => *e.get_mut() += &g,
        Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

/// Named tensors with trainability flags and a stage tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Param>,
    stage: Stage,
}

impl ParameterStore {
    pub fn empty(stage: Stage) -> Self {
        Self {
            tensors: BTreeMap::new(),
            stage,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub(crate) fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(Error::Stage {
                expected,
                found: self.stage,
            })
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) {
        self.tensors.insert(name.into(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("tensor `{name}` is missing")))
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Dimension(format!("tensor `{name}` is missing")))
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.param(name).map(|p| &p.value)
    }

    pub fn view1(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.get(name)?.view().into_dimensionality::<Ix1>().map_err(|e| shape_err(name, e))
    }

    pub fn view2(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.get(name)?.view().into_dimensionality::<Ix2>().map_err(|e| shape_err(name, e))
    }

    pub fn view4(&self, name: &str) -> Result<ArrayView4<'_, f64>> {
        self.get(name)?.view().into_dimensionality::<Ix4>().map_err(|e| shape_err(name, e))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.param_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.tensors.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Bitwise tensor equality, NaN payloads included.
    pub fn tensor_bits_equal(&self, other: &ParameterStore, name: &str) -> bool {
        match (self.tensors.get(name), other.tensors.get(name)) {
            (Some(a), Some(b)) => {
                a.value.shape() == b.value.shape()
                    && a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Fresh base-stage parameters; every tensor trainable.
    pub fn init_base(config: &DetectorConfig, vocab: &ClassVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::empty(Stage::Base);
        let mut gaussian = |shape: &[usize], std: f64| -> ArrayD<f64> {
            let normal = Normal::new(0.0, std).expect("positive std");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(&mut rng))
        };
        let zeros = |shape: &[usize]| ArrayD::<f64>::zeros(IxDyn(shape));

        let mut cin = 3;
        for block in 0..BACKBONE_BLOCKS {
            let cout = config.backbone_channels[block];
            let std = (2.0 / (cin * 9) as f64).sqrt();
            store.insert(names::backbone_w(block), gaussian(&[cout, cin, 3, 3], std), true);
            store.insert(names::backbone_b(block), zeros(&[cout]), true);
            cin = cout;
        }
        let c = config.feature_channels();
        let r = config.rpn_channels;
        let a = config.anchors_per_cell();
        store.insert(names::RPN_CONV_W, gaussian(&[r, c, 3, 3], (2.0 / (c * 9) as f64).sqrt()), true);
        store.insert(names::RPN_CONV_B, zeros(&[r]), true);
        store.insert(names::RPN_OBJ_W, gaussian(&[a, r], 0.01), true);
        store.insert(names::RPN_OBJ_B, zeros(&[a]), true);
        store.insert(names::RPN_DELTA_W, gaussian(&[4 * a, r], 0.01), true);
        store.insert(names::RPN_DELTA_B, zeros(&[4 * a]), true);

        let d = config.roi_feature_dim;
        let pooled = config.pooled_dim();
        let base = Branch::Base;
        store.insert(base.fc_w(1), gaussian(&[d, pooled], (2.0 / pooled as f64).sqrt()), true);
        store.insert(base.fc_b(1), zeros(&[d]), true);
        store.insert(base.fc_w(2), gaussian(&[d, d], (2.0 / d as f64).sqrt()), true);
        store.insert(base.fc_b(2), zeros(&[d]), true);

        let ways = vocab.num_base() + 1;
        store.insert(base.cls_w(), gaussian(&[ways, d], 0.01), true);
        if config.classifier == ClassifierMode::Linear {
            store.insert(base.cls_b(), zeros(&[ways]), true);
        }
        let reg_rows = match config.regressor {
            RegressorMode::Agnostic => 4,
            RegressorMode::Specific => 4 * ways,
        };
        store.insert(names::REG_W, gaussian(&[reg_rows, d], 0.001), true);
        store.insert(names::REG_B, zeros(&[reg_rows]), true);
        Ok(store)
    }
}

fn shape_err(name: &str, e: ndarray::ShapeError) -> Error {
    Error::Dimension(format!("tensor `{name}`: {e}"))
}
