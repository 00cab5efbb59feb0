//! Epoch batch plans.

use alloc::vec::Vec;

use crate::rng;

/// A seeded permutation of `0..n` cut into consecutive batches; the last
/// batch may be short.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub order: Vec<usize>,
    pub batches: Vec<Vec<usize>>,
}

pub fn plan_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> BatchPlan {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut r = rng::stream(seed, &[0xBA7C, epoch]);
    let order = rng::permutation(&mut r, n);
    let batches = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    BatchPlan { order, batches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_dataset_is_one_batch() {
        let p = plan_batches(10, 16, 3, 0);
        assert_eq!(p.batches.len(), 1);
        assert_eq!(p.batches[0].len(), 10);
    }

    #[test]
    fn epochs_reshuffle() {
        assert_ne!(plan_batches(50, 8, 1, 0).order, plan_batches(50, 8, 1, 1).order);
        assert_eq!(plan_batches(50, 8, 1, 4), plan_batches(50, 8, 1, 4));
    }

    proptest! {
        #[test]
        fn plan_is_a_bijection(n in 1usize..300, b in 1usize..40, seed: u64, epoch in 0u64..100) {
            let p = plan_batches(n, b, seed, epoch);
            let mut all: Vec<usize> = p.batches.concat();
            prop_assert_eq!(&all, &p.order);
            all.sort_unstable();
            prop_assert!(all.iter().enumerate().all(|(i, &v)| i == v));
            prop_assert_eq!(p.batches.len(), n.div_ceil(b));
            prop_assert!(p.batches[..p.batches.len() - 1].iter().all(|c| c.len() == b));
        }
    }
}
