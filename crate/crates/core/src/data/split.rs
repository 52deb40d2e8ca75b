use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percentages for train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 70,
            val: 20,
            test: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffled index partition: `floor(train% · n)` and `floor(val% · n)`
/// indices, the remainder to test.
pub fn split_indices(n: usize, ratios: SplitRatios, seed: u64) -> Result<Split<usize>> {
    if ratios.train == 0
        || ratios.val == 0
        || ratios.test == 0
        || ratios.train + ratios.val + ratios.test != 100
    {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 100, got {ratios:?}"
        )));
    }
    if n < 3 {
        return Err(Error::InsufficientData { need: 3, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * ratios.train as usize / 100;
    let n_val = n * ratios.val as usize / 100;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

pub fn split<T: Clone>(items: &[T], ratios: SplitRatios, seed: u64) -> Result<Split<T>> {
    let s = split_indices(items.len(), ratios, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: pick(&s.train),
        val: pick(&s.val),
        test: pick(&s.test),
    })
}
