//! Deterministic 1-way K-shot episode sampling.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, FoldSplit, IGNORE};
use crate::error::{Error, Result};

/// One image of an episode: a dataset index plus its binary mask
/// (1 = episode class, 0 = anything else, 255 = ignore).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub sample: usize,
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: u8,
    pub support: Vec<EpisodeItem>,
    pub query: EpisodeItem,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }

    pub fn sample_indices(&self) -> Vec<usize> {
        self.support
            .iter()
            .map(|s| s.sample)
            .chain(std::iter::once(self.query.sample))
            .collect()
    }
}

pub fn binarize(mask: &Array2<u8>, class_id: u8) -> Array2<u8> {
    mask.mapv(|v| {
        if v == IGNORE {
            IGNORE
        } else {
            u8::from(v == class_id)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededSampler {
    pub seed: u64,
    pub episode_count: usize,
}

impl SeededSampler {
    pub fn new(seed: u64, episode_count: usize) -> Self {
        Self {
            seed,
            episode_count,
        }
    }

    pub fn sample(
        &self,
        dataset: &Dataset,
        fold: &FoldSplit,
        shots: usize,
        use_test_classes: bool,
    ) -> Result<Vec<Episode>> {
        sample_episodes(
            dataset,
            fold,
            shots,
            self.episode_count,
            self.seed,
            use_test_classes,
        )
    }
}

/// Draws `count` episodes: a class uniformly from the chosen partition, then
/// `shots + 1` distinct images containing it (the last one is the query).
pub fn sample_episodes(
    dataset: &Dataset,
    fold: &FoldSplit,
    shots: usize,
    count: usize,
    seed: u64,
    use_test_classes: bool,
) -> Result<Vec<Episode>> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let classes: Vec<u8> = fold.classes(use_test_classes).iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::Config("class partition is empty".into()));
    }
    for &c in &classes {
        let available = dataset.containing(c).len();
        if available < shots + 1 {
            return Err(Error::NotEnoughSamples {
                class_id: c,
                available,
                required: shots + 1,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = classes[rng.random_range(0..classes.len())];
        let pool = dataset.containing(class_id);
        let picks = index::sample(&mut rng, pool.len(), shots + 1);
        let item = |k: usize| {
            let sample = pool[picks.index(k)];
            EpisodeItem {
                sample,
                mask: binarize(&dataset.samples()[sample].mask, class_id),
            }
        };
        let support = (0..shots).map(item).collect();
        let query = item(shots);
        episodes.push(Episode {
            class_id,
            support,
            query,
        });
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageSample, SplitConfig};
    use ndarray::Array3;

    fn dataset() -> Dataset {
        // class 1 in 3 images, class 2 in 2 images
        let masks = [
            vec![1, 0, 255, 0],
            vec![1, 1, 2, 0],
            vec![0, 1, 0, 0],
            vec![2, 2, 0, 0],
        ];
        let samples = masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                ImageSample::new(
                    format!("s{i}"),
                    Array3::zeros((2, 2, 3)),
                    Array2::from_shape_vec((2, 2), m.clone()).unwrap(),
                )
                .unwrap()
            })
            .collect();
        Dataset::from_samples(samples, SplitConfig::even(&[1, 2], 2).unwrap()).unwrap()
    }

    #[test]
    fn deterministic_for_equal_seeds() {
        let ds = dataset();
        let fold = ds.fold(1).unwrap(); // train = {1}
        let a = sample_episodes(&ds, &fold, 1, 2, 7, false).unwrap();
        let b = sample_episodes(&ds, &fold, 1, 2, 7, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn support_query_disjoint_and_binary() {
        let ds = dataset();
        let fold = ds.fold(1).unwrap();
        for ep in sample_episodes(&ds, &fold, 2, 50, 3, false).unwrap() {
            let idx = ep.sample_indices();
            let mut dedup = idx.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), idx.len());
            for s in &ep.support {
                assert!(s.mask.iter().any(|&v| v == 1));
            }
            for item in ep.support.iter().chain([&ep.query]) {
                assert!(item.mask.iter().all(|&v| v == 0 || v == 1 || v == IGNORE));
            }
        }
    }

    #[test]
    fn ignore_is_preserved() {
        let ds = dataset();
        let m = binarize(&ds.samples()[0].mask, 1);
        assert_eq!(m.as_slice().unwrap(), &[1, 0, 255, 0]);
    }

    #[test]
    fn too_few_samples_names_class() {
        let ds = dataset();
        let fold = ds.fold(0).unwrap(); // test = {1}, 3 images
        let err = sample_episodes(&ds, &fold, 5, 1, 0, true).unwrap_err();
        assert!(matches!(
            err,
            Error::NotEnoughSamples {
                class_id: 1,
                available: 3,
                required: 6
            }
        ));
    }
}
