mod common;

use common::checks::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cross_attend_matches_loop_attention(seed in any::<u64>()) {
        prop_assert!(cross_attend_error(seed) < 1e-6);
    }

    #[test]
    fn pixel_refine_matches_loop_windows(seed in any::<u64>()) {
        prop_assert!(pixel_refine_error(seed) < 1e-6);
    }

    #[test]
    fn prototypes_match_loop_pooling(seed in any::<u64>()) {
        prop_assert!(pooling_error(seed) < 1e-6);
    }

    #[test]
    fn fusion_matches_per_channel_gate(seed in any::<u64>()) {
        prop_assert!(fusion_error(seed) < 1e-6);
    }

    #[test]
    fn aggregation_matches_reassembly_and_smoothing(seed in any::<u64>()) {
        prop_assert!(aggregation_error(seed) < 1e-6);
    }

    #[test]
    fn iou_matches_set_counting(seed in any::<u64>()) {
        prop_assert!(iou_error(seed) < 1e-12);
    }

    #[test]
    fn topk_matches_sort_oracle(scores in prop::collection::vec(-3i32..3, 1..40), kf in 0.0f64..1.0) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.5).collect();
        let k = 1 + ((s.len() - 1) as f64 * kf) as usize;
        let mut got = disa_core::sdm::topk_indices(&s, k);
        got.sort_unstable();
        prop_assert_eq!(got, disa_oracles::naive_topk(&s, k));
    }
}
