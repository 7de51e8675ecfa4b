mod common;

use common::{instance, worst_errors, REL_TOL};
use proptest::prelude::*;
use sounderfeit::neural::Activation;

#[test]
fn tanh_networks_match_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed, Activation::Tanh, seed % 2 == 0);
        let errs = worst_errors(&inst, 100, seed);
        assert!(errs.iter().all(|e| *e < REL_TOL), "seed {seed}: {errs:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relu_networks_match_finite_differences(seed in 0u64..1_000_000) {
        let inst = instance(seed, Activation::Relu, false);
        let errs = worst_errors(&inst, 100, seed);
        prop_assert!(errs.iter().all(|e| *e < REL_TOL), "{:?}", errs);
    }
}
