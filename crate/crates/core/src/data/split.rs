use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::Dataset;
use crate::config::Phase;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Fraction of each category's images used for training.
pub const TRAIN_FRACTION: f64 = 0.75;

/// Disjoint base/novel category sets plus per-category train/test image
/// indices into a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub train: BTreeMap<usize, Vec<usize>>,
    pub test: BTreeMap<usize, Vec<usize>>,
    pub k_shot: usize,
}

impl SplitSpec {
    pub fn categories(&self, phase: Phase) -> Result<&[usize]> {
        match phase {
            Phase::Base => Ok(&self.base),
            Phase::Novel => Ok(&self.novel),
            other => Err(Error::Data(format!("no episode categories for phase `{other}`"))),
        }
    }

    /// All train images of the given categories, category-major.
    pub fn train_of(&self, cats: &[usize]) -> (Vec<usize>, Vec<usize>) {
        Self::flatten(&self.train, cats)
    }

    pub fn test_of(&self, cats: &[usize]) -> (Vec<usize>, Vec<usize>) {
        Self::flatten(&self.test, cats)
    }

    fn flatten(map: &BTreeMap<usize, Vec<usize>>, cats: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for c in cats {
            for &i in map.get(c).map(Vec::as_slice).unwrap_or(&[]) {
                idx.push(i);
                labels.push(*c);
            }
        }
        (idx, labels)
    }
}

pub fn make_splits(dataset: &Dataset, base_count: usize, k_shot: usize, rng: &mut Stream) -> Result<SplitSpec> {
    let mut cats = dataset.categories();
    if base_count == 0 || base_count >= cats.len() {
        return Err(Error::config(
            "base_categories",
            format!("{base_count} must be between 1 and {} (total categories minus one)", cats.len() - 1),
        ));
    }
    if k_shot == 0 {
        return Err(Error::config("k_shot", "must be positive"));
    }
    cats.shuffle(rng);
    let mut base = cats[..base_count].to_vec();
    let mut novel = cats[base_count..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();

    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut all = base.clone();
    all.extend(&novel);
    all.sort_unstable();
    for c in all {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, idx.len() - 1);
        let test_part = idx.split_off(n_train);
        if novel.contains(&c) {
            if k_shot > idx.len() {
                return Err(Error::Data(format!(
                    "k_shot {k_shot} exceeds the {} training image(s) of novel category {c}",
                    idx.len()
                )));
            }
            idx.truncate(k_shot);
        }
        train.insert(c, idx);
        test.insert(c, test_part);
    }
    Ok(SplitSpec { base, novel, train, test, k_shot })
}

/// One iteration's support and query sets over every category of a phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub categories: Vec<usize>,
    /// Dataset indices, `n` per category, category-major.
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Some category's pool was too small to keep queries out of the support.
    pub query_reuses_support: bool,
}

/// All-way episode. Support is drawn without replacement per category;
/// queries come from the images left over, falling back to reusing the
/// category's pool when nothing is left.
pub fn sample_episode(split: &SplitSpec, phase: Phase, n: usize, n_query: usize, rng: &mut Stream) -> Result<Episode> {
    let cats = split.categories(phase)?.to_vec();
    let mut ep = Episode {
        categories: cats.clone(),
        support: vec![],
        support_labels: vec![],
        query: vec![],
        query_labels: vec![],
        query_reuses_support: false,
    };
    for c in cats {
        let mut pool = split.train.get(&c).cloned().unwrap_or_default();
        if pool.is_empty() || n > pool.len() {
            return Err(Error::Data(format!("category {c} has {} training image(s), episode needs {n}", pool.len())));
        }
        pool.shuffle(rng);
        ep.support.extend(&pool[..n]);
        ep.support_labels.extend(std::iter::repeat_n(c, n));
        let rest = &pool[n..];
        if rest.len() >= n_query {
            ep.query.extend(&rest[..n_query]);
        } else {
            ep.query_reuses_support = true;
            ep.query.extend((0..n_query).map(|i| pool[i % pool.len()]));
        }
        ep.query_labels.extend(std::iter::repeat_n(c, n_query));
    }
    Ok(ep)
}
