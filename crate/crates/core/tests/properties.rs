mod common;

use common::laws::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn saliency_gradient_matches_finite_differences(seed in any::<u64>()) {
        let e = saliency_gradient_error(seed);
        prop_assert!(e < 1e-3, "relative error {}", e);
    }

    #[test]
    fn top_k_partition_laws(seed in any::<u64>()) {
        prop_assert_eq!(partition_laws(seed), Ok(()));
    }

    #[test]
    fn background_never_leaks_into_foreground(seed in any::<u64>()) {
        prop_assert!(leakage(seed) < 1e-7);
    }

    #[test]
    fn gate_halves_bounds_and_shrinks(seed in any::<u64>()) {
        prop_assert_eq!(gate_laws(seed), Ok(()));
    }
}
