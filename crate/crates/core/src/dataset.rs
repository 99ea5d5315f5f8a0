//! Labeled image collections and poison-set selection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// A classification dataset: images, integer labels and bookkeeping for
/// which items have been poisoned.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    poison_flags: Vec<bool>,
    /// Target label the poisoned items were re-labeled to, when any.
    target_label: Option<usize>,
}

impl LabeledDataset {
    /// Builds a clean dataset. All images must share one shape, every label
    /// must be below `num_classes`, and at least two classes must exist.
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<LabeledDataset> {
        if images.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|im| !im.same_shape(first)) {
                return Err(Error::Consistency(format!(
                    "image {bad} has shape {:?}, expected {:?}",
                    images[bad].shape(),
                    first.shape()
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        let n = images.len();
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            poison_flags: vec![false; n],
            target_label: None,
        })
    }

    /// Rebuilds the dataset with poison bookkeeping; used by the poisoning op.
    pub(crate) fn with_poison(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
        poison_flags: Vec<bool>,
        target_label: usize,
    ) -> Result<LabeledDataset> {
        let mut ds = LabeledDataset::new(images, labels, num_classes)?;
        if poison_flags.len() != ds.len() {
            return Err(Error::Consistency(format!(
                "{} poison flags for {} items",
                poison_flags.len(),
                ds.len()
            )));
        }
        ds.poison_flags = poison_flags;
        ds.target_label = Some(target_label);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn poison_flags(&self) -> &[bool] {
        &self.poison_flags
    }

    pub fn is_poisoned(&self, i: usize) -> bool {
        self.poison_flags[i]
    }

    pub fn target_label(&self) -> Option<usize> {
        self.target_label
    }

    /// Shape of the images, or an error on an empty dataset.
    pub fn image_shape(&self) -> Result<(usize, usize, usize)> {
        self.images
            .first()
            .map(|im| im.shape())
            .ok_or_else(|| Error::Consistency("dataset is empty".into()))
    }

    /// First `cap` items (everything when `cap >= len`). Keeps order, so a
    /// capped load is reproducible without any randomness.
    pub fn truncated(&self, cap: usize) -> LabeledDataset {
        let n = cap.min(self.len());
        LabeledDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            poison_flags: self.poison_flags[..n].to_vec(),
            target_label: self.target_label,
        }
    }
}

/// Draws `round(ratio * n)` distinct item indices uniformly without
/// replacement. The result is sorted ascending and fully determined by
/// `(n, ratio, seed)`.
pub fn select_poison_indices(dataset: &LabeledDataset, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(Error::Argument(format!("poison ratio {ratio} outside [0, 1]")));
    }
    let n = dataset.len();
    let count = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: after `count` swaps the prefix is a uniform
    // without-replacement sample.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> LabeledDataset {
        let images = (0..n)
            .map(|i| Image::constant(4, 4, 1, i as f64 / n as f64).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledDataset::new(images, labels, 3).unwrap()
    }

    #[test]
    fn count_matches_rounded_ratio() {
        let ds = tiny_dataset(1000);
        let picked = select_poison_indices(&ds, 0.05, 7).unwrap();
        assert_eq!(picked.len(), 50);
    }

    #[test]
    fn selection_is_deterministic_and_distinct() {
        let ds = tiny_dataset(200);
        let a = select_poison_indices(&ds, 0.25, 99).unwrap();
        let b = select_poison_indices(&ds, 0.25, 99).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), a.len(), "indices must be distinct");
        assert!(a.iter().all(|&i| i < 200));
    }

    #[test]
    fn different_seed_changes_selection() {
        let ds = tiny_dataset(200);
        let a = select_poison_indices(&ds, 0.25, 1).unwrap();
        let b = select_poison_indices(&ds, 0.25, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ratio_bounds() {
        let ds = tiny_dataset(10);
        assert!(select_poison_indices(&ds, -0.1, 0).is_err());
        assert!(select_poison_indices(&ds, 1.1, 0).is_err());
        assert_eq!(select_poison_indices(&ds, 0.0, 0).unwrap().len(), 0);
        assert_eq!(select_poison_indices(&ds, 1.0, 0).unwrap().len(), 10);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let images = vec![Image::constant(2, 2, 1, 0.5).unwrap()];
        let err = LabeledDataset::new(images, vec![5], 3).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn mixed_shapes_rejected() {
        let images = vec![
            Image::constant(2, 2, 1, 0.5).unwrap(),
            Image::constant(3, 2, 1, 0.5).unwrap(),
        ];
        let err = LabeledDataset::new(images, vec![0, 1], 2).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn truncated_keeps_prefix() {
        let ds = tiny_dataset(10);
        let t = ds.truncated(4);
        assert_eq!(t.len(), 4);
        assert_eq!(t.labels(), &ds.labels()[..4]);
        assert_eq!(ds.truncated(50).len(), 10);
    }
}
