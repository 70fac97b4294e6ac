//! Labeled feature matrices and split helpers shared by the training code.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// One utterance representation (`t x d`) with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Tensor, label: usize) -> Self {
        Sample { x, label }
    }
}

/// Feature dimension shared by every sample, or an error naming the first mismatch.
pub fn common_dim<'a>(xs: impl IntoIterator<Item = &'a Tensor>) -> Result<Option<usize>> {
    let mut d = None;
    for (i, x) in xs.into_iter().enumerate() {
        match d {
            None => d = Some(x.cols()),
            Some(d0) if d0 != x.cols() => return Err(Error::at_sample(i, Error::dim("feature dim", &[d0], x.shape()))),
            _ => {}
        }
    }
    Ok(d)
}

/// Splits indices `0..labels.len()` into (train, validation), taking roughly
/// `val_fraction` of each label's items for validation and at least one item
/// for training. Labels with a single item go to training.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut rng = rng::stream(seed, Purpose::Split, 0);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Unstratified version of [`stratified_split`]; keeps at least one item on each side when `n >= 2`.
pub fn random_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split, 1));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_split_keeps_every_label_in_training() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 3);
        assert_eq!(tr.len() + va.len(), 50);
        assert_eq!(va.len(), 10);
        for l in 0..5 {
            assert!(tr.iter().any(|&i| labels[i] == l));
            assert!(va.iter().any(|&i| labels[i] == l));
        }
        assert_eq!((tr.clone(), va.clone()), stratified_split(&labels, 0.2, 3));
    }

    #[test]
    fn random_split_sizes() {
        let (tr, va) = random_split(10, 0.1, 1);
        assert_eq!((tr.len(), va.len()), (9, 1));
        let (tr, va) = random_split(1, 0.5, 1);
        assert_eq!((tr.len(), va.len()), (1, 0));
    }
}
