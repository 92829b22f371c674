use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::Checkpoint;
use crate::detector::{Branch, ClassifierMode, Stage};
use crate::error::{Error, Result};
use crate::synthdata::ClassVocabulary;

/// Standard deviation of the fresh novel classifier weights.
pub const NOVEL_INIT_STD: f64 = 0.01;

/// Copies the base RoI extractor into a parallel novel branch and adds a freshly
/// initialised `|novel|`-way classifier. Every existing tensor is left untouched.
pub fn branch_surgery(base: &Checkpoint, vocab: &ClassVocabulary, seed: u64) -> Result<Checkpoint> {
    base.params.require_stage(Stage::Base)?;
    if vocab.base_classes() != base.vocabulary.base_classes() {
        return Err(Error::Argument("surgery vocabulary has different base classes from the checkpoint".into()));
    }
    if vocab.num_novel() == 0 {
        return Err(Error::Argument("surgery needs at least one novel class".into()));
    }
    let mut out = base.clone();
    for layer in [1, 2] {
        for (src, dst) in [
            (Branch::Base.fc_w(layer), Branch::Novel.fc_w(layer)),
            (Branch::Base.fc_b(layer), Branch::Novel.fc_b(layer)),
        ] {
            let p = base.params.param(&src)?;
            out.params.insert(dst, p.value.clone(), p.trainable);
        }
    }
    let d = base.config.roi_feature_dim;
    let n = vocab.num_novel();
    let normal = Normal::new(0.0, NOVEL_INIT_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[n, d]), || normal.sample(&mut rng));
    out.params.insert(Branch::Novel.cls_w(), w, true);
    if base.config.classifier == ClassifierMode::Linear {
        out.params.insert(Branch::Novel.cls_b(), ArrayD::zeros(IxDyn(&[n])), true);
    }
    out.params.set_stage(Stage::Branched);
    out.vocabulary = vocab.clone();
    out.metadata.config_digest = super::checkpoint::config_digest(&out.config, vocab);
    out.metadata.surgery_seed = Some(seed);
    out.metadata.step = 0;
    Ok(out)
}
