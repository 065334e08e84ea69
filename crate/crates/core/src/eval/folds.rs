use std::collections::BTreeSet;

use crate::error::{contract, Result};
use crate::nn::RngStream;

/// Participant-grouped split: a validation holdout plus `k` test folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub validation: BTreeSet<String>,
    pub folds: Vec<BTreeSet<String>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Participants used for training when fold `f` is the test set.
    pub fn train_participants(&self, f: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, s)| s.iter().cloned())
            .collect()
    }
}

/// Holds out max(1, round(val_frac·P)) participants, shuffles the rest and
/// deals them round-robin into `k` folds.
pub fn make_folds(participants: &[String], k: usize, val_frac: f64, seed: u64) -> Result<FoldPlan> {
    contract!(k >= 1, "fold count must be positive");
    contract!(
        (0.0..1.0).contains(&val_frac),
        "validation fraction must lie in [0, 1), got {val_frac}"
    );
    let unique: BTreeSet<&String> = participants.iter().collect();
    contract!(unique.len() == participants.len(), "duplicate participant ids");
    let p = participants.len();
    contract!(p > k, "{p} participants cannot fill {k} folds plus a validation holdout");
    let n_val = ((val_frac * p as f64).round() as usize).max(1);
    contract!(
        p - n_val >= k,
        "{} participants left after holding out {n_val} cannot fill {k} folds",
        p - n_val
    );

    let mut ids: Vec<String> = participants.to_vec();
    ids.sort();
    let mut rng = RngStream::new(seed).derive("folds");
    rng.shuffle(&mut ids);
    let validation = ids[..n_val].iter().cloned().collect();
    let mut rest = ids[n_val..].to_vec();
    rng.shuffle(&mut rest);
    let mut folds = vec![BTreeSet::new(); k];
    for (i, id) in rest.into_iter().enumerate() {
        folds[i % k].insert(id);
    }
    Ok(FoldPlan { validation, folds, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    #[test]
    fn twenty_participants() {
        let plan = make_folds(&ids(20), 5, 0.1, 1).unwrap();
        assert_eq!(plan.validation.len(), 2);
        let sizes: Vec<usize> = plan.folds.iter().map(BTreeSet::len).collect();
        assert_eq!(sizes, vec![4, 4, 4, 3, 3]);
        assert_eq!(plan, make_folds(&ids(20), 5, 0.1, 1).unwrap());
        assert_ne!(plan, make_folds(&ids(20), 5, 0.1, 2).unwrap());
    }

    #[test]
    fn too_few_participants() {
        assert!(make_folds(&ids(5), 5, 0.1, 0).is_err());
        assert!(make_folds(&ids(6), 5, 0.1, 0).is_ok());
    }

    proptest! {
        #[test]
        fn partition(p in 6usize..60, seed in any::<u64>()) {
            let all = ids(p);
            let plan = make_folds(&all, 5, 0.1, seed).unwrap();
            let mut seen: BTreeSet<String> = plan.validation.clone();
            for f in &plan.folds {
                prop_assert!(!f.is_empty());
                for id in f {
                    prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
                }
            }
            prop_assert_eq!(seen.len(), p);
            let sizes: Vec<usize> = plan.folds.iter().map(BTreeSet::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in 0..5 {
                let train = plan.train_participants(f);
                prop_assert!(train.is_disjoint(&plan.folds[f]));
                prop_assert!(train.is_disjoint(&plan.validation));
            }
        }
    }
}
