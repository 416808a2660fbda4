use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Phantom-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles `phantom_ids` with a seeded permutation and cuts it
/// `floor(0.6 n) / floor(0.2 n) / remainder`.
pub fn split_dataset(phantom_ids: &[String], seed: u64) -> Result<Split> {
    let n = phantom_ids.len();
    if n < 5 {
        return Err(Error::Usage(format!("split needs at least 5 phantoms, got {n}")));
    }
    let mut sorted: Vec<&String> = phantom_ids.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Usage(format!("duplicate phantom id {:?}", w[0])));
    }
    let order = rng::permutation(n, seed, "split", "phantoms");
    let shuffled: Vec<String> = order.iter().map(|&i| phantom_ids[i].clone()).collect();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    Ok(Split {
        train: shuffled[..n_train].to_vec(),
        val: shuffled[n_train..n_train + n_val].to_vec(),
        test: shuffled[n_train + n_val..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:04}")).collect()
    }

    #[test]
    fn sizes_follow_floor_rule() {
        for (n, want) in [(100, (60, 20, 20)), (5, (3, 1, 1)), (7, (4, 1, 2)), (13, (7, 2, 4))] {
            let s = split_dataset(&ids(n), 1).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), want, "n = {n}");
        }
    }

    #[test]
    fn rejects_small_or_duplicate_input() {
        assert!(matches!(split_dataset(&ids(4), 0), Err(Error::Usage(_))));
        let mut dup = ids(6);
        dup[5] = dup[0].clone();
        assert!(matches!(split_dataset(&dup, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_changes_partition() {
        let a = split_dataset(&ids(100), 1).unwrap();
        assert_eq!(a, split_dataset(&ids(100), 1).unwrap());
        assert_ne!(a, split_dataset(&ids(100), 2).unwrap());
    }
}
