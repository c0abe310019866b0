//! The item universe, item dissimilarity and the region splitting rule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = u64;

/// Dense position of an item inside an [`ItemStore`]. Regions hold keys, not ids.
pub type ItemKey = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseItem {
    pub id: ItemId,
    pub features: Vec<f64>,
}

impl CourseItem {
    /// Builds an item with exactly `d_c` features. Missing trailing features are
    /// filled with 0.
    pub fn new(id: ItemId, mut features: Vec<f64>, d_c: usize) -> Result<Self> {
        if features.len() > d_c {
            return Err(Error::InvalidItem(format!(
                "item {id} has {} features, expected at most {d_c}",
                features.len()
            )));
        }
        if let Some(v) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidItem(format!(
                "item {id} has feature {v} outside [0, 1]"
            )));
        }
        features.resize(d_c, 0.0);
        Ok(CourseItem { id, features })
    }
}

/// Weighted Euclidean distance between feature vectors. Weights default to 1.
pub fn dissimilarity(a: &CourseItem, b: &CourseItem, weights: Option<&[f64]>) -> Result<f64> {
    if a.features.len() != b.features.len() {
        return Err(Error::InvalidItem(format!(
            "dimension mismatch: item {} has {} features, item {} has {}",
            a.id,
            a.features.len(),
            b.id,
            b.features.len()
        )));
    }
    let sq: f64 = match weights {
        None => a
            .features
            .iter()
            .zip(&b.features)
            .map(|(x, y)| (x - y) * (x - y))
            .sum(),
        Some(w) => {
            if w.len() != a.features.len() {
                return Err(Error::InvalidItem(format!(
                    "weight vector has {} entries, expected {}",
                    w.len(),
                    a.features.len()
                )));
            }
            a.features
                .iter()
                .zip(&b.features)
                .zip(w)
                .map(|((x, y), w)| w * (x - y) * (x - y))
                .sum()
        }
    };
    Ok(sq.sqrt())
}

/// Item universe with optional storage-unit assignment per item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemStore {
    d_c: usize,
    weights: Option<Vec<f64>>,
    items: Vec<CourseItem>,
    units: Vec<Option<u32>>,
    #[serde(skip)]
    index: HashMap<ItemId, ItemKey>,
}

impl ItemStore {
    pub fn new(d_c: usize) -> Result<Self> {
        if d_c == 0 {
            return Err(Error::InvalidConfig("d_c must be positive".into()));
        }
        Ok(ItemStore {
            d_c,
            weights: None,
            items: Vec::new(),
            units: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.d_c || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dissimilarity weights must be {} nonnegative reals",
                self.d_c
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insert(&mut self, item: CourseItem, unit: Option<u32>) -> Result<ItemKey> {
        if item.features.len() != self.d_c {
            return Err(Error::InvalidItem(format!(
                "item {} has {} features, store expects {}",
                item.id,
                item.features.len(),
                self.d_c
            )));
        }
        if self.index.contains_key(&item.id) {
            return Err(Error::DuplicateItem(item.id));
        }
        let key = ItemKey::try_from(self.items.len())
            .map_err(|_| Error::InvalidConfig("item store is full".into()))?;
        self.index.insert(item.id, key);
        self.items.push(item);
        self.units.push(unit);
        Ok(key)
    }

    pub fn get(&self, key: ItemKey) -> &CourseItem {
        &self.items[key as usize]
    }

    pub fn key_of(&self, id: ItemId) -> Option<ItemKey> {
        self.index.get(&id).copied()
    }

    pub fn unit_of(&self, key: ItemKey) -> Option<u32> {
        self.units[key as usize]
    }

    #[inline]
    pub fn feature(&self, key: ItemKey, dim: usize) -> f64 {
        self.items[key as usize].features[dim]
    }

    pub fn keys(&self) -> impl Iterator<Item = ItemKey> {
        0..self.items.len() as ItemKey
    }

    pub fn items(&self) -> &[CourseItem] {
        &self.items
    }

    pub fn distance(&self, a: ItemKey, b: ItemKey) -> f64 {
        // Both items come from this store, so dimensions always agree.
        dissimilarity(self.get(a), self.get(b), self.weights()).unwrap_or(f64::NAN)
    }

    /// Rebuilds the id index after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self
            .items
            .iter()
            .enumerate()
            .map(|(k, it)| (it.id, k as ItemKey))
            .collect();
    }
}

/// A recorded split: items with `features[dim] <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub dim: usize,
    pub threshold: f64,
}

impl Split {
    #[inline]
    pub fn goes_left(&self, store: &ItemStore, key: ItemKey) -> bool {
        store.feature(key, self.dim) <= self.threshold
    }
}

/// The item subset owned by one tree node, plus its split once children exist.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub items: Vec<ItemKey>,
    pub split: Option<Split>,
}

impl Region {
    pub fn new(items: Vec<ItemKey>) -> Self {
        Region { items, split: None }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub split: Split,
    pub left: Vec<ItemKey>,
    pub right: Vec<ItemKey>,
}

/// Splits a region at depth `depth` on feature `depth mod d_C`.
///
/// The threshold is the lower median of the region's values on that feature;
/// ties go left, so a singleton yields `(item, empty)`. Children keep the
/// parent's item order.
pub fn split_region(items: &[ItemKey], depth: u32, store: &ItemStore) -> Result<SplitOutcome> {
    if items.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let dim = depth as usize % store.d_c();
    let mut values: Vec<f64> = items.iter().map(|&k| store.feature(k, dim)).collect();
    let mid = (values.len() - 1) / 2;
    let (_, median, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let split = Split {
        dim,
        threshold: *median,
    };
    let (left, right) = items.iter().partition(|&&k| split.goes_left(store, k));
    Ok(SplitOutcome { split, left, right })
}

/// Largest pairwise dissimilarity inside a region; 0 for a singleton.
pub fn region_diam(items: &[ItemKey], store: &ItemStore) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut best = 0.0f64;
    for (n, &a) in items.iter().enumerate() {
        for &b in &items[n + 1..] {
            best = best.max(store.distance(a, b));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: u64, f: &[f64]) -> CourseItem {
        CourseItem::new(id, f.to_vec(), f.len()).unwrap()
    }

    fn store_1d(values: &[f64]) -> ItemStore {
        let mut s = ItemStore::new(1).unwrap();
        for (i, &v) in values.iter().enumerate() {
            s.insert(item(i as u64 + 1, &[v]), None).unwrap();
        }
        s
    }

    #[test]
    fn dissimilarity_examples() {
        let a = item(1, &[0.0, 0.0]);
        assert_eq!(dissimilarity(&a, &a, None).unwrap(), 0.0);
        assert_eq!(dissimilarity(&a, &item(2, &[1.0, 0.0]), None).unwrap(), 1.0);
        let d = dissimilarity(&a, &item(3, &[1.0, 1.0]), None).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(matches!(
            dissimilarity(&a, &item(4, &[1.0]), None),
            Err(Error::InvalidItem(_))
        ));
    }

    #[test]
    fn weighted_dissimilarity() {
        let a = item(1, &[0.0, 0.0]);
        let b = item(2, &[1.0, 1.0]);
        let d = dissimilarity(&a, &b, Some(&[4.0, 0.0])).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_features_are_zero() {
        let c = CourseItem::new(9, vec![0.4], 3).unwrap();
        assert_eq!(c.features, vec![0.4, 0.0, 0.0]);
        assert!(CourseItem::new(9, vec![0.4, 1.5], 3).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = store_1d(&[0.1]);
        assert_eq!(s.insert(item(1, &[0.3]), None), Err(Error::DuplicateItem(1)));
    }

    #[test]
    fn median_split_example() {
        let s = store_1d(&[0.9, 0.1, 0.8, 0.2]);
        let out = split_region(&[0, 1, 2, 3], 0, &s).unwrap();
        assert_eq!(out.split.threshold, 0.2);
        assert_eq!(out.left, vec![1, 3]);
        assert_eq!(out.right, vec![0, 2]);
    }

    #[test]
    fn singleton_and_tie_splits() {
        let s = store_1d(&[0.4, 0.4, 0.4]);
        let one = split_region(&[0], 0, &s).unwrap();
        assert_eq!((one.left, one.right), (vec![0], vec![]));
        let ties = split_region(&[0, 1, 2], 5, &s).unwrap();
        assert_eq!((ties.left, ties.right), (vec![0, 1, 2], vec![]));
        assert_eq!(split_region(&[], 0, &s), Err(Error::EmptyRegion));
    }

    #[test]
    fn split_rotates_dimension() {
        let mut s = ItemStore::new(3).unwrap();
        s.insert(item(1, &[0.0, 0.9, 0.0]), None).unwrap();
        s.insert(item(2, &[1.0, 0.1, 0.0]), None).unwrap();
        let out = split_region(&[0, 1], 4, &s).unwrap();
        assert_eq!(out.split.dim, 1);
        assert_eq!(out.left, vec![1]);
    }

    #[test]
    fn diam_examples() {
        let s = store_1d(&[0.2, 0.5]);
        assert_eq!(region_diam(&[0], &s).unwrap(), 0.0);
        assert!((region_diam(&[0, 1], &s).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(region_diam(&[], &s), Err(Error::EmptyRegion));
    }

    #[test]
    fn diam_matches_exhaustive_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ItemStore::new(4).unwrap();
        let mut raw = Vec::new();
        for id in 0..5u64 {
            let f: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            raw.push(f.clone());
            s.insert(item(id, &f), None).unwrap();
        }
        let mut brute = 0.0f64;
        let mut pairs = 0;
        for i in 0..5 {
            for j in 0..5 {
                if i < j {
                    pairs += 1;
                    let d: f64 = raw[i]
                        .iter()
                        .zip(&raw[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    brute = brute.max(d);
                }
            }
        }
        assert_eq!(pairs, 10);
        assert_eq!(region_diam(&[0, 1, 2, 3, 4], &s).unwrap(), brute);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions_and_shrinks(values in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 2), 1..40), depth in 0u32..6) {
                let mut s = ItemStore::new(2).unwrap();
                for (i, f) in values.iter().enumerate() {
                    s.insert(item(i as u64, f), None).unwrap();
                }
                let keys: Vec<ItemKey> = s.keys().collect();
                let a = split_region(&keys, depth, &s).unwrap();
                let b = split_region(&keys, depth, &s).unwrap();
                prop_assert_eq!(&a, &b);
                let mut union: Vec<ItemKey> = a.left.iter().chain(&a.right).copied().collect();
                union.sort_unstable();
                prop_assert_eq!(&union, &keys);
                prop_assert!(!a.left.is_empty());
                let parent = region_diam(&keys, &s).unwrap();
                prop_assert!(region_diam(&a.left, &s).unwrap() <= parent);
                if !a.right.is_empty() {
                    prop_assert!(region_diam(&a.right, &s).unwrap() <= parent);
                }
            }
        }
    }
}
