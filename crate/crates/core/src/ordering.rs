//! Per-epoch example orderings for the four strategies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::task::ExamplePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Stride,
    FixedRandom,
    Random,
    Target,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 4] = [
        StrategyTag::Stride,
        StrategyTag::FixedRandom,
        StrategyTag::Random,
        StrategyTag::Target,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyTag::Stride => "stride",
            StrategyTag::FixedRandom => "fixed_random",
            StrategyTag::Random => "random",
            StrategyTag::Target => "target",
        }
    }

    /// Whether the same order is replayed every epoch.
    pub fn is_fixed(&self) -> bool {
        !matches!(self, StrategyTag::Random)
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| {
            Error::Input(format!(
                "unknown strategy `{s}` (expected one of stride, fixed_random, random, target)"
            ))
        })
    }
}

/// One epoch's ordering and its batch partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    pub order: Vec<usize>,
    pub batch_size: usize,
    pub epoch: usize,
    pub strategy: StrategyTag,
}

impl PermutationPlan {
    /// Consecutive slices of `order`; the last one may be short.
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        for &i in &self.order {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

/// `floor(sqrt(p))`, the default stride.
pub fn default_stride(p: u32) -> u32 {
    let mut s = (f64::from(p)).sqrt() as u32;
    while (s + 1) * (s + 1) <= p {
        s += 1;
    }
    while s * s > p {
        s -= 1;
    }
    s
}

/// Indices stably sorted by `(a mod s, a)`.
pub fn stride_order(train: &[ExamplePair], stride: u32) -> Vec<usize> {
    assert!(stride >= 1, "stride must be >= 1");
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train[i].a % stride, train[i].a));
    order
}

/// Indices stably sorted by the label `(a + b) mod p`.
pub fn target_order(train: &[ExamplePair]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| train[i].c);
    order
}

pub fn fixed_random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::fisher_yates(&mut order, &mut rng::stream(seed, rng::FIXED_ORDER, &[]));
    order
}

/// A fresh permutation that is a pure function of `(master_seed, epoch)`.
pub fn fresh_shuffle(n: usize, master_seed: u64, epoch: usize) -> Vec<usize> {
    shuffle_from_stream(n, master_seed, rng::SHUFFLE, &[epoch as u64])
}

pub fn shuffle_from_stream(n: usize, seed: u64, label: &str, indices: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::fisher_yates(&mut order, &mut rng::stream(seed, label, indices));
    order
}

/// Round-half-up of `p / s`: the embedding frequency a stride-`s` traversal
/// is expected to imprint.
pub fn predicted_fundamental(p: u32, stride: u32) -> u32 {
    assert!(stride >= 1, "stride must be >= 1");
    let (p, s) = (u64::from(p), u64::from(stride));
    ((2 * p + s) / (2 * s)) as u32
}

/// Builds per-epoch plans for one strategy over a fixed training set.
/// Fixed strategies compute their order once.
#[derive(Debug, Clone)]
pub struct Orderer {
    strategy: StrategyTag,
    batch_size: usize,
    master_seed: u64,
    n: usize,
    fixed: Option<Vec<usize>>,
}

impl Orderer {
    pub fn new(
        strategy: StrategyTag,
        train: &[ExamplePair],
        p: u32,
        stride: Option<u32>,
        batch_size: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Input("batch_size must be > 0".into()));
        }
        let fixed = match strategy {
            StrategyTag::Stride => {
                let s = stride.unwrap_or_else(|| default_stride(p));
                if s == 0 || s >= p {
                    return Err(Error::Input(format!("stride {s} must satisfy 1 <= s < p = {p}")));
                }
                Some(stride_order(train, s))
            }
            StrategyTag::Target => Some(target_order(train)),
            StrategyTag::FixedRandom => Some(fixed_random_order(train.len(), master_seed)),
            StrategyTag::Random => None,
        };
        Ok(Orderer {
            strategy,
            batch_size,
            master_seed,
            n: train.len(),
            fixed,
        })
    }

    pub fn strategy(&self) -> StrategyTag {
        self.strategy
    }

    pub fn plan(&self, epoch: usize) -> PermutationPlan {
        let order = match &self.fixed {
            Some(order) => order.clone(),
            None => fresh_shuffle(self.n, self.master_seed, epoch),
        };
        PermutationPlan {
            order,
            batch_size: self.batch_size,
            epoch,
            strategy: self.strategy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_dataset, TaskSpec};
    use proptest::prelude::*;

    fn pairs(raw: &[(u32, u32)], p: u32) -> Vec<ExamplePair> {
        raw.iter().map(|&(a, b)| ExamplePair::new(a, b, p).unwrap()).collect()
    }

    #[test]
    fn default_strides() {
        assert_eq!(default_stride(9973), 99);
        assert_eq!(default_stride(97), 9);
        assert_eq!(default_stride(5), 2);
    }

    #[test]
    fn stride_hand_example() {
        // keys: (4%3,4)=(1,4) (2%3,2)=(2,2) (9%3,9)=(0,9) (3%3,3)=(0,3)
        let train = pairs(&[(4, 1), (2, 7), (9, 3), (3, 5)], 11);
        assert_eq!(stride_order(&train, 3), vec![3, 2, 0, 1]);
    }

    #[test]
    fn stride_ties_keep_sample_order() {
        let train = pairs(&[(4, 2), (1, 0), (4, 0), (4, 1)], 11);
        assert_eq!(stride_order(&train, 3), vec![1, 0, 2, 3]);
    }

    #[test]
    fn target_examples() {
        // labels: 2, 0, 1
        let train = pairs(&[(1, 1), (2, 3), (0, 1)], 5);
        assert_eq!(target_order(&train), vec![1, 2, 0]);
        let same = pairs(&[(1, 1), (0, 2), (2, 0), (3, 4)], 5);
        assert_eq!(target_order(&same), vec![0, 1, 2, 3]);
    }

    #[test]
    fn target_batches_span_few_classes_at_p9973() {
        let spec = TaskSpec {
            p: 9973,
            train_size: 300_000,
            test_size: 1,
            data_seed: 199,
        };
        let ds = generate_dataset(&spec).unwrap();
        let order = target_order(&ds.train);
        let spans: Vec<u32> = order
            .chunks(256)
            .filter(|b| b.len() == 256)
            .map(|b| ds.train[*b.last().unwrap()].c - ds.train[b[0]].c + 1)
            .collect();
        let mean = spans.iter().map(|&s| f64::from(s)).sum::<f64>() / spans.len() as f64;
        assert!((8.0..=10.0).contains(&mean), "mean span {mean}");
    }

    #[test]
    fn fixed_random_matches_hand_fisher_yates() {
        // Replay the stream independently: for i = n-1..1, j = draw in [0, i].
        let n = 10;
        let mut rng = rng::stream(7, rng::FIXED_ORDER, &[]);
        let mut expect: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let bound = i as u64 + 1;
            let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
            let j = loop {
                let x = rand::RngCore::next_u64(&mut rng);
                if x <= zone {
                    break (x % bound) as usize;
                }
            };
            expect.swap(i, j);
        }
        assert_eq!(fixed_random_order(n, 7), expect);
        assert_eq!(fixed_random_order(n, 7), fixed_random_order(n, 7));
        assert_eq!(fixed_random_order(1, 3), vec![0]);
    }

    #[test]
    fn fresh_shuffle_depends_on_epoch() {
        assert_eq!(fresh_shuffle(10, 5, 3), fresh_shuffle(10, 5, 3));
        assert_ne!(fresh_shuffle(10, 5, 0), fresh_shuffle(10, 5, 1));
        let two = fresh_shuffle(2, 9, 0);
        assert!(two == vec![0, 1] || two == vec![1, 0]);
        assert_eq!(two, fresh_shuffle(2, 9, 0));
    }

    #[test]
    fn predicted_fundamentals() {
        assert_eq!(predicted_fundamental(9973, 50), 199);
        assert_eq!(predicted_fundamental(9973, 99), 101);
        assert_eq!(predicted_fundamental(9973, 150), 66);
        assert_eq!(predicted_fundamental(97, 9), 11);
        // exact half rounds up
        assert_eq!(predicted_fundamental(5, 2), 3);
    }

    #[test]
    fn partial_batch_is_kept() {
        let plan = PermutationPlan {
            order: (0..300_000).collect(),
            batch_size: 256,
            epoch: 0,
            strategy: StrategyTag::Random,
        };
        assert_eq!(plan.num_batches(), 1172);
        assert_eq!(plan.batches().last().unwrap().len(), 224);
    }

    #[test]
    fn strategy_tags_parse() {
        for t in StrategyTag::ALL {
            assert_eq!(t.as_str().parse::<StrategyTag>().unwrap(), t);
        }
        assert!("sorted".parse::<StrategyTag>().is_err());
    }

    proptest! {
        #[test]
        fn plans_are_permutations_and_fixed_ones_repeat(
            seed in any::<u64>(),
            n in 1usize..200,
            strat in 0usize..4,
        ) {
            let p = 31;
            let spec = TaskSpec { p, train_size: n, test_size: 1, data_seed: seed };
            let ds = generate_dataset(&spec).unwrap();
            let strategy = StrategyTag::ALL[strat];
            let orderer = Orderer::new(strategy, &ds.train, p, None, 16, seed).unwrap();
            let e0 = orderer.plan(0);
            let e1 = orderer.plan(1);
            prop_assert!(e0.is_permutation());
            prop_assert!(e1.is_permutation());
            if strategy.is_fixed() {
                prop_assert_eq!(&e0.order, &e1.order);
            }
            if strategy == StrategyTag::Stride {
                let s = default_stride(p);
                let keys: Vec<_> = e0.order.iter().map(|&i| (ds.train[i].a % s, ds.train[i].a)).collect();
                prop_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn random_changes_across_three_epochs(seed in any::<u64>(), n in 10usize..60) {
            let orders: Vec<_> = (0..3).map(|e| fresh_shuffle(n, seed, e)).collect();
            let distinct = (orders[0] != orders[1]) as u8 + (orders[1] != orders[2]) as u8 + (orders[0] != orders[2]) as u8;
            prop_assert!(distinct >= 2);
        }
    }
}
