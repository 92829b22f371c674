//! Deterministic synthetic shape scenes, dataset splits, K-shot support sampling and
//! COCO-format annotation I/O.

mod coco;
mod shapes;
mod support;
mod vocab;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use coco::{read_coco_annotations, write_coco_annotations, CocoImageRecord};
pub use shapes::{generate_scene, SceneGenerator, SceneParams, SceneStyle, ShapeKind, MAX_PAIRWISE_IOU};
pub use support::{sample_support_set, SupportSet};
pub use vocab::ClassVocabulary;

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Index in the joint label space (never the background index).
    pub class_index: usize,
    pub bbox: BBox,
}

/// Raster image (`H×W×3`, values in `[0, 1]`) plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: Array3<f64>,
    pub instances: Vec<Instance>,
    pub image_id: u64,
    pub seed: u64,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn count_class(&self, class_index: usize) -> usize {
        self.instances.iter().filter(|i| i.class_index == class_index).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub base_train: Vec<AnnotatedImage>,
    pub novel_pool: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub vocabulary: ClassVocabulary,
}

/// Per-split upper bound on instances per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceLimits {
    pub base_train: usize,
    pub novel_pool: usize,
    pub test: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            base_train: 3,
            novel_pool: 2,
            test: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub base_train_images: usize,
    pub novel_pool_images: usize,
    pub test_images: usize,
    /// `[height, width]`.
    pub canvas: [usize; 2],
    pub seed: u64,
    pub max_instances: InstanceLimits,
    pub scene: SceneParams,
    /// Style of the test split only; training splits always use the standard style.
    pub test_style: SceneStyle,
    /// Largest K that later sampling must be able to satisfy.
    pub max_shots: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            base_classes: ["circle", "square", "triangle", "ring", "cross", "star"]
                .map(String::from)
                .to_vec(),
            novel_classes: ["pentagon", "crescent", "diamond"].map(String::from).to_vec(),
            base_train_images: 200,
            novel_pool_images: 60,
            test_images: 50,
            canvas: [64, 64],
            seed: 1,
            max_instances: InstanceLimits::default(),
            scene: SceneParams::default(),
            test_style: SceneStyle::Standard,
            max_shots: 10,
        }
    }
}

impl DatasetConfig {
    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        let vocab = ClassVocabulary::new(self.base_classes.clone(), self.novel_classes.clone())?;
        if let Some(bad) = self
            .base_classes
            .iter()
            .chain(&self.novel_classes)
            .find(|n| ShapeKind::from_name(n).is_none())
        {
            return Err(Error::Config(format!("`{bad}` is not a known shape class")));
        }
        Ok(vocab)
    }
}

/// SplitMix64 finalizer over `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_BASE: u64 = 1;
const STREAM_NOVEL: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Builds the three splits. The first instance of scene `i` cycles through the split's
/// classes so every class is represented.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetSplit> {
    let vocab = config.vocabulary()?;
    let canvas = (config.canvas[0], config.canvas[1]);
    let base: Vec<usize> = vocab.base_indices().collect();
    let novel: Vec<usize> = vocab.novel_indices().collect();
    let all: Vec<usize> = vocab.foreground_indices().collect();
    if config.test_images < all.len() {
        return Err(Error::Config(format!(
            "{} test images cannot cover {} classes",
            config.test_images,
            all.len()
        )));
    }

    let train_gen = SceneGenerator::new(&vocab, canvas, SceneParams {
        style: SceneStyle::Standard,
        ..config.scene.clone()
    })?;
    let test_gen = SceneGenerator::new(&vocab, canvas, SceneParams {
        style: config.test_style,
        ..config.scene.clone()
    })?;

    let make = |gen: &SceneGenerator<'_>, stream: u64, count: usize, classes: &[usize], limit: usize| {
        (0..count)
            .map(|i| {
                let seed = derive_seed(config.seed, stream, i as u64);
                let first = (!classes.is_empty()).then(|| classes[i % classes.len()]);
                let mut img = gen.generate(seed, classes, limit, first)?;
                img.image_id = stream * 1_000_000 + i as u64;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()
    };

    let base_train = make(&train_gen, STREAM_BASE, config.base_train_images, &base, config.max_instances.base_train)?;
    let novel_pool = if novel.is_empty() {
        Vec::new()
    } else {
        make(&train_gen, STREAM_NOVEL, config.novel_pool_images, &novel, config.max_instances.novel_pool)?
    };
    let test = make(&test_gen, STREAM_TEST, config.test_images, &all, config.max_instances.test)?;

    for &c in &novel {
        let available: usize = novel_pool.iter().map(|img| img.count_class(c)).sum();
        if available < config.max_shots {
            return Err(Error::Config(format!(
                "novel pool holds {available} instances of `{}`, fewer than max_shots = {}",
                vocab.name_of(c).unwrap_or("?"),
                config.max_shots
            )));
        }
    }

    Ok(DatasetSplit {
        base_train,
        novel_pool,
        test,
        vocabulary: vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            base_train_images: 40,
            novel_pool_images: 45,
            test_images: 12,
            ..Default::default()
        }
    }

    #[test]
    fn base_train_is_base_only_and_test_covers_all() {
        let split = build_dataset(&small()).unwrap();
        let v = &split.vocabulary;
        assert!(split.base_train.iter().flat_map(|i| &i.instances).all(|i| v.is_base(i.class_index)));
        assert!(split.novel_pool.iter().flat_map(|i| &i.instances).all(|i| v.is_novel(i.class_index)));
        for c in v.foreground_indices() {
            assert!(split.test.iter().any(|img| img.count_class(c) > 0), "class {c} missing");
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_dataset(&small()).unwrap(), build_dataset(&small()).unwrap());
    }

    #[test]
    fn default_config_matches_desk_scale() {
        let split = build_dataset(&DatasetConfig::default()).unwrap();
        assert_eq!(split.base_train.len(), 200);
        assert_eq!(split.novel_pool.len(), 60);
        assert_eq!(split.test.len(), 50);
        assert_eq!(split.base_train.iter().flat_map(|i| &i.instances).filter(|i| split.vocabulary.is_novel(i.class_index)).count(), 0);
    }

    #[test]
    fn small_pool_is_a_config_error() {
        let cfg = DatasetConfig {
            novel_pool_images: 6,
            ..small()
        };
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_shape_rejected() {
        let cfg = DatasetConfig {
            novel_classes: vec!["hexagon".into()],
            ..small()
        };
        assert!(cfg.vocabulary().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
    }
}
