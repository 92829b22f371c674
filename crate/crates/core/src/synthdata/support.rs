use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, ClassVocabulary};
use crate::error::{Error, Result};

/// K annotated instances per novel class, drawn from the novel pool.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub shots_per_class: usize,
    pub items: Vec<AnnotatedImage>,
    pub seed: u64,
}

impl SupportSet {
    pub fn count_class(&self, class_index: usize) -> usize {
        self.items.iter().map(|img| img.count_class(class_index)).sum()
    }
}

/// Selects exactly `k` instances of every novel class, uniformly without replacement.
/// Unselected instances are dropped from the returned annotations.
pub fn sample_support_set(
    pool: &[AnnotatedImage],
    k: usize,
    seed: u64,
    vocab: &ClassVocabulary,
) -> Result<SupportSet> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = BTreeSet::new();
    for class in vocab.novel_indices() {
        let candidates: Vec<(usize, usize)> = pool
            .iter()
            .enumerate()
            .flat_map(|(i, img)| {
                img.instances
                    .iter()
                    .enumerate()
                    .filter(move |(_, inst)| inst.class_index == class)
                    .map(move |(j, _)| (i, j))
            })
            .collect();
        if candidates.len() < k {
            return Err(Error::InsufficientInstances {
                class: vocab.name_of(class).unwrap_or("?").to_string(),
                available: candidates.len(),
                requested: k,
            });
        }
        for pick in rand::seq::index::sample(&mut rng, candidates.len(), k) {
            selected.insert(candidates[pick]);
        }
    }

    let items = pool
        .iter()
        .enumerate()
        .filter_map(|(i, img)| {
            let instances: Vec<_> = img
                .instances
                .iter()
                .enumerate()
                .filter(|(j, _)| selected.contains(&(i, *j)))
                .map(|(_, inst)| *inst)
                .collect();
            (!instances.is_empty()).then(|| AnnotatedImage {
                instances,
                ..img.clone()
            })
        })
        .collect();

    Ok(SupportSet {
        shots_per_class: k,
        items,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, DatasetConfig, Instance};
    use crate::geometry::BBox;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn split() -> crate::synthdata::DatasetSplit {
        build_dataset(&DatasetConfig {
            base_train_images: 0,
            test_images: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn one_shot_counts() {
        let s = split();
        let set = sample_support_set(&s.novel_pool, 1, 0, &s.vocabulary).unwrap();
        let total: usize = set.items.iter().map(|i| i.instances.len()).sum();
        assert_eq!(total, s.vocabulary.num_novel());
    }

    #[test]
    fn deterministic() {
        let s = split();
        let a = sample_support_set(&s.novel_pool, 10, 3, &s.vocabulary).unwrap();
        let b = sample_support_set(&s.novel_pool, 10, 3, &s.vocabulary).unwrap();
        assert_eq!(a, b);
        let c = sample_support_set(&s.novel_pool, 10, 4, &s.vocabulary).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_names_class() {
        let v = ClassVocabulary::new(["circle"], ["cross"]).unwrap();
        let img = AnnotatedImage {
            pixels: Array3::zeros((32, 32, 3)),
            instances: (0..9)
                .map(|_| Instance {
                    class_index: 2,
                    bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
                })
                .collect(),
            image_id: 0,
            seed: 0,
        };
        let err = sample_support_set(&[img], 10, 0, &v).unwrap_err();
        match err {
            Error::InsufficientInstances { class, available, .. } => {
                assert_eq!(class, "cross");
                assert_eq!(available, 9);
            }
            other => panic!("unexpected {other}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exact_k_per_class(k in 1usize..=10, seed in any::<u64>()) {
            let s = split();
            let set = sample_support_set(&s.novel_pool, k, seed, &s.vocabulary).unwrap();
            for c in s.vocabulary.novel_indices() {
                prop_assert_eq!(set.count_class(c), k);
            }
        }
    }
}
