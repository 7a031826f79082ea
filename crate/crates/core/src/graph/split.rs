use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Masks;
use crate::error::{Error, Result};

/// Smallest class the 60/20/20 split accepts.
pub const MIN_CLASS_SIZE: usize = 5;

/// Per-class random split: `floor(20%)` test, `floor(20%)` validation, the
/// rest training. Unlabeled nodes (label < 0) land in no mask.
pub fn split_nodes(labels: &[i64], seed: u64) -> Result<Masks> {
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Masks::empty(labels.len());
    for (class, mut nodes) in by_class {
        if nodes.len() < MIN_CLASS_SIZE {
            return Err(Error::ClassTooSmall { class: class as usize, count: nodes.len(), min: MIN_CLASS_SIZE });
        }
        nodes.shuffle(&mut rng);
        let n_test = nodes.len() / 5;
        let n_val = nodes.len() / 5;
        for (k, &i) in nodes.iter().enumerate() {
            if k < n_test {
                masks.test[i] = true;
            } else if k < n_test + n_val {
                masks.val[i] = true;
            } else {
                masks.train[i] = true;
            }
        }
    }
    Ok(masks)
}
