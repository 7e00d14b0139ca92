use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Fold index per case, aligned with the case order it was built from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// `(train, test)` case indices for `fold`, each ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignments.len()).partition(|&i| self.assignments[i] != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles by `seed`, then deals cases to folds round-robin. With
/// stratification each class is shuffled and dealt in turn, the dealing
/// position carrying over between classes.
pub fn kfold_split(labels: &[u8], k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!("{} cases cannot fill {k} folds", labels.len())));
    }
    let mut rng = Rng::new(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        [0u8, 1].iter().map(|&class| (0..labels.len()).filter(|&i| labels[i] == class).collect::<Vec<_>>()).collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    if stratified {
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        for (class, g) in groups.iter().enumerate() {
            if g.len() < k {
                return Err(Error::InvalidArgument(format!("class {class} has {} cases, fewer than k = {k}", g.len())));
            }
        }
    }
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for mut g in groups {
        rng.shuffle(&mut g);
        for i in g {
            assignments[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan { k, seed, stratified, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_into_five() {
        let plan = kfold_split(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 5, 3, false).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        let mut seen: Vec<usize> = (0..5).flat_map(|f| plan.split(f).1).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_six_four() {
        let labels = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let plan = kfold_split(&labels, 2, 9, true).unwrap();
        for f in 0..2 {
            let pos = plan.split(f).1.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 3);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let a = kfold_split(&labels, 5, 1, true).unwrap();
        assert_eq!(a, kfold_split(&labels, 5, 1, true).unwrap());
        assert_ne!(a, kfold_split(&labels, 5, 2, true).unwrap());
    }

    #[test]
    fn errors() {
        assert!(kfold_split(&[0, 1, 0], 1, 0, false).is_err());
        assert!(kfold_split(&[0, 1], 3, 0, false).is_err());
        assert!(kfold_split(&[0, 0, 0, 1], 2, 0, true).is_err());
    }
}
