//! Seeded epoch-shuffle sampling of training units.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of the data pipeline, enough to resume sampling exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub consumed: u64,
}

/// An endless stream over `0..n`: each epoch is a fresh permutation drawn
/// from stream `epoch` of a ChaCha8 generator seeded with `seed`, so the
/// stream position alone determines what comes next.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    consumed: u64,
    epoch: u64,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        Self::resume(n, SamplerState { seed, consumed: 0 })
    }

    pub fn resume(n: usize, state: SamplerState) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("cannot sample from an empty training set".into()));
        }
        let epoch = state.consumed / n as u64;
        Ok(EpochSampler {
            n,
            seed: state.seed,
            consumed: state.consumed,
            epoch,
            order: permutation(n, state.seed, epoch),
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            consumed: self.consumed,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }

    fn next_index(&mut self) -> usize {
        let epoch = self.consumed / self.n as u64;
        if epoch != self.epoch {
            self.epoch = epoch;
            self.order = permutation(self.n, self.seed, epoch);
        }
        let i = self.order[(self.consumed % self.n as u64) as usize];
        self.consumed += 1;
        i
    }
}

fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Number of distinct passages touched by a batch of units.
pub fn distinct_passages(batch: &[usize], passage_of: impl Fn(usize) -> String) -> usize {
    batch.iter().map(|&i| passage_of(i)).collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn each_epoch_is_a_permutation() {
        let mut s = EpochSampler::new(7, 3).unwrap();
        for _ in 0..3 {
            let mut e = s.next_batch(7);
            e.sort_unstable();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_set_is_usage_error() {
        assert!(matches!(EpochSampler::new(0, 1), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn resume_continues_the_same_stream(n in 1usize..20, seed in any::<u64>(), cut in 0usize..60, more in 1usize..40) {
            let mut full = EpochSampler::new(n, seed).unwrap();
            let all = full.next_batch(cut + more);
            let mut head = EpochSampler::new(n, seed).unwrap();
            head.next_batch(cut);
            let mut tail = EpochSampler::resume(n, head.state()).unwrap();
            prop_assert_eq!(&all[cut..], &tail.next_batch(more)[..]);
        }
    }
}
