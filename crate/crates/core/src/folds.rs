//! Stratified partitioning shared by the train/test split and K-fold CV.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::stats;

/// Per-class train counts use `round(train_fraction * class_n)` with ties
/// rounded toward train (`f64::round` rounds half away from zero).
pub fn stratified_split(labels: &[bool], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, key) in [(false, "split:neg"), (true, "split:pos")] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        let n_test = idx.len() - n_train;
        if n_train < 2 || n_test < 2 {
            return Err(Error::TooFewPerClass(format!(
                "class {} has {} rows ({} train / {} test)",
                u8::from(class),
                idx.len(),
                n_train,
                n_test
            )));
        }
        idx.shuffle(&mut stats::rng(stats::derive_seed(seed, key)));
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Assigns each row to one of `k` folds, dealing shuffled rows of each class
/// round-robin so every fold receives `floor` or `ceil` of the class count.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut fold = vec![0usize; labels.len()];
    for (class, key) in [(false, "folds:neg"), (true, "folds:pos")] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::TooFewPerClass(format!(
                "class {} has {} rows for {} folds",
                u8::from(class),
                idx.len(),
                k
            )));
        }
        idx.shuffle(&mut stats::rng(stats::derive_seed(seed, key)));
        for (j, &i) in idx.iter().enumerate() {
            fold[i] = j % k;
        }
    }
    Ok(fold)
}

/// `(train_rows, held_out_rows)` for fold `f`.
pub fn fold_rows(assignment: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, &a) in assignment.iter().enumerate() {
        if a == f {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_are_exact_per_class() {
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let (train, test) = stratified_split(&labels, 0.5, 11).unwrap();
        assert_eq!(train.iter().filter(|&&i| labels[i]).count(), 3);
        assert_eq!(train.iter().filter(|&&i| !labels[i]).count(), 3);
        assert_eq!(test.iter().filter(|&&i| labels[i]).count(), 2);
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn different_seeds_same_counts() {
        let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let (a, _) = stratified_split(&labels, 0.7, 1).unwrap();
        let (b, _) = stratified_split(&labels, 0.7, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), b.len());
        let pos = |v: &[usize]| v.iter().filter(|&&i| labels[i]).count();
        assert_eq!(pos(&a), pos(&b));
    }

    #[test]
    fn rejects_bad_fraction_and_tiny_classes() {
        let labels = vec![true, false, true, false];
        assert!(matches!(stratified_split(&labels, 1.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(stratified_split(&labels, 0.5, 0), Err(Error::TooFewPerClass(_))));
    }

    #[test]
    fn folds_balance_classes() {
        let labels: Vec<bool> = (0..53).map(|i| i % 4 == 0).collect();
        let a = stratified_folds(&labels, 5, 9).unwrap();
        for f in 0..5 {
            let pos = (0..53).filter(|&i| a[i] == f && labels[i]).count();
            assert!((2..=3).contains(&pos));
        }
    }
}
