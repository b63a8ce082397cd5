//! Stratified k-fold splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::registry::stream_rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// Case indices, ascending.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles each class with a seeded stream and deals its members round-robin
/// over the folds, continuing the deal across classes so fold sizes differ by
/// at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} available cases",
            labels.len()
        )));
    }
    let mut rng = stream_rng(seed, "kfold");
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut fold_of = vec![0usize; labels.len()];
    let mut next = 0;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| FoldSplit {
            k: f,
            train: (0..labels.len()).filter(|&i| fold_of[i] != f).collect(),
            val: (0..labels.len()).filter(|&i| fold_of[i] == f).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_balanced_cases_five_folds() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let folds = kfold_split(&labels, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<usize> = Vec::new();
        for f in &folds {
            let pos = f.val.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((f.val.len(), pos), (2, 1));
            assert_eq!(f.train.len() + f.val.len(), 10);
            seen.extend(&f.val);
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, kfold_split(&labels, 5, 11).unwrap());
    }

    #[test]
    fn too_many_folds() {
        assert!(kfold_split(&[0, 1, 0], 4, 0).is_err());
    }
}
