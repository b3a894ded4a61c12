use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;

use ordlab::counterfactual::decompose;
use ordlab::nn::{Layout, ParamVec, ParameterVector};
use ordlab::ordering::{predicted_fundamental, Orderer, StrategyTag};
use ordlab::spectral::{fold, harmonic_series, weight_spectrum};
use ordlab::task::{generate_dataset, TaskSpec};

fn two_layers(xs: Vec<f64>) -> ParameterVector {
    let n = xs.len() / 2;
    let layout = Layout::new(vec![("first".into(), vec![n]), ("second".into(), vec![xs.len() - n])]);
    ParamVec::from_vec(Arc::new(layout), xs).unwrap()
}

fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn split_is_disjoint_and_labelled(p in prop::sample::select(vec![5u32, 7, 11, 13, 31]), seed in any::<u64>(), frac in 0.1f64..0.9) {
        let grid = (p * p) as usize;
        let train_size = ((grid as f64) * frac) as usize;
        let ds = generate_dataset(&TaskSpec { p, train_size, test_size: grid - train_size, data_seed: seed }).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|e| (e.a, e.b)).collect();
        prop_assert_eq!(train.len(), train_size);
        for e in ds.train.iter().chain(&ds.test) {
            prop_assert_eq!(e.c, (e.a + e.b) % p);
        }
        prop_assert!(ds.test.iter().all(|e| !train.contains(&(e.a, e.b))));
    }

    #[test]
    fn every_plan_is_a_permutation(seed in any::<u64>(), epoch in 0usize..50, batch in 1usize..40) {
        let ds = generate_dataset(&TaskSpec { p: 13, train_size: 100, test_size: 69, data_seed: seed }).unwrap();
        for s in [StrategyTag::Stride, StrategyTag::FixedRandom, StrategyTag::Random, StrategyTag::Target] {
            let plan = Orderer::new(s, &ds.train, 13, None, batch, seed).unwrap().plan(epoch);
            prop_assert!(plan.is_permutation());
            prop_assert_eq!(plan.num_batches(), 100usize.div_ceil(batch));
        }
    }

    #[test]
    fn spectrum_is_normalized_and_conjugate_symmetric(p in 3usize..40, d in 1usize..4, seed in any::<u64>()) {
        let mut x = seed | 1;
        let w: Vec<f64> = (0..p * d).map(|_| {
            x ^= x << 13; x ^= x >> 7; x ^= x << 17;
            (x % 2001) as f64 / 1000.0 - 1.0
        }).collect();
        prop_assume!(w.iter().any(|v| *v != 0.0));
        let s = weight_spectrum(&w, p, d).unwrap();
        prop_assert!((s.power.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 1..p {
            prop_assert!((s.power[k] - s.power[p - k]).abs() < 1e-9);
        }
        let energy = w.iter().map(|v| v * v).sum::<f64>() * p as f64;
        prop_assert!((s.total - energy).abs() <= 1e-9 * energy);
    }

    #[test]
    fn harmonics_stay_in_the_folded_band(f in 1u64..5000, p in prop::sample::select(vec![97u64, 9973])) {
        for h in harmonic_series(f, p, 8) {
            prop_assert!(2 * h <= p);
            prop_assert_eq!(fold(h, p), h);
        }
    }

    #[test]
    fn predicted_fundamental_is_nearest_integer(p in 2u32..20000, s in 1u32..500) {
        let f = predicted_fundamental(p, s) as f64;
        let exact = p as f64 / s as f64;
        prop_assert!((f - exact).abs() <= 0.5 + 1e-12);
    }

    #[test]
    fn content_and_ordering_partition_the_energy(actual in small_vec(8), a in small_vec(8), b in small_vec(8), c in small_vec(8)) {
        let cf: Vec<ParameterVector> = vec![two_layers(a), two_layers(b), two_layers(c)];
        let g = two_layers(actual);
        prop_assume!(g.norm() > 1e-6);
        match decompose(&g, &cf) {
            Ok(d) => {
                prop_assert!(d.partition_residual() < 1e-10);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&d.ordering_fraction));
            }
            Err(ordlab::Error::Degenerate(_)) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }
}
