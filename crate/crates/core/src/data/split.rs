use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::{derive_seed, Fnv64};

/// Index sets of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_by_label(labels: &[u8], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    order
}

/// Stratified k-fold partition of `0..labels.len()`.
///
/// Users are shuffled within each class, the classes concatenated and dealt
/// round-robin, so fold sizes and per-class counts each differ by at most one.
pub fn kfold_split(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::contract(format!(
            "{} users cannot be split into {k} folds",
            labels.len()
        )));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::contract("k-fold split needs both labels present"));
    }
    let order = shuffled_by_label(labels, derive_seed(seed, "kfold"));
    let mut tests = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        tests[pos % k].push(i);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Splits `indices` into (kept, held_out) with about `fraction` of each class
/// held out. Returns no hold-out when the set is too small to spare one.
pub fn stratified_holdout(indices: &[usize], labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let sub: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout"));
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..sub.len())
            .filter(|&i| sub[i] == class)
            .map(|i| indices[i])
            .collect();
        idx.shuffle(&mut rng);
        let n_hold = ((idx.len() as f64) * fraction).round() as usize;
        let n_hold = if idx.len() > 1 { n_hold.min(idx.len() - 1) } else { 0 };
        held.extend_from_slice(&idx[..n_hold]);
        keep.extend_from_slice(&idx[n_hold..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Fingerprint of a fold assignment.
pub fn fold_hash(folds: &[Fold]) -> u64 {
    let mut h = Fnv64::new().u64(folds.len() as u64);
    for f in folds {
        h = h.u64(f.test.len() as u64);
        for &i in &f.test {
            h = h.u64(i as u64);
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 2) as u8).collect()
    }

    #[test]
    fn hundred_users_five_folds() {
        let labels = balanced(100);
        let folds = kfold_split(&labels, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![0; 100];
        for f in &folds {
            assert_eq!(f.test.len(), 20);
            assert_eq!(f.train.len(), 80);
            let bad = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert!((bad as i64 - 10).abs() <= 1);
            for &i in &f.test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_per_seed() {
        let labels = balanced(37);
        assert_eq!(kfold_split(&labels, 5, 9).unwrap(), kfold_split(&labels, 5, 9).unwrap());
        assert_ne!(
            kfold_split(&labels, 5, 9).unwrap(),
            kfold_split(&labels, 5, 10).unwrap()
        );
    }

    #[test]
    fn too_few_users_or_one_label() {
        assert!(matches!(kfold_split(&balanced(4), 5, 0), Err(Error::Contract(_))));
        assert!(matches!(kfold_split(&[1; 10], 5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let labels = balanced(40);
        let idx: Vec<usize> = (0..40).collect();
        let (keep, held) = stratified_holdout(&idx, &labels, 0.1, 1);
        assert_eq!(held.len(), 4);
        assert_eq!(held.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert_eq!(keep.len() + held.len(), 40);
        assert!(held.iter().all(|i| !keep.contains(i)));
    }
}
