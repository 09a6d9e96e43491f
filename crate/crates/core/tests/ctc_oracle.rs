//! CTC forward-backward against exhaustive path enumeration.

mod common;

use common::*;
use proptest::prelude::*;

use usm_core::ctc::{collapse, ctc_brute_force, ctc_greedy_decode, ctc_loss, LabelSequence, TokenVocab};

#[test]
fn two_hundred_instances_match_enumeration() {
    let (nll, grad) = ctc_oracle_errors(200, 17);
    assert!(nll < 1e-10, "nll deviation {nll:e}");
    assert!(grad < 1e-5, "gradient relative error {grad:e}");
}

#[test]
fn hand_computed_two_frames() {
    // Paths for "a" over two frames: (a,a), (a,-), (-,a).
    let p = [[0.5f64, 0.5], [0.25, 0.75]];
    let lp: Vec<f64> = p.iter().flatten().map(|x| x.ln()).collect();
    let want = 0.5 * 0.75 + 0.5 * 0.25 + 0.5 * 0.75;
    let got = ctc_loss(&lp, 2, &LabelSequence::new(vec![1])).unwrap();
    assert!((got.nll + f64::ln(want)).abs() < 1e-12);
}

#[test]
fn repeated_labels_need_a_separator() {
    let t = LabelSequence::new(vec![1, 1]);
    assert_eq!(t.min_frames(), 3);
    let lp = random_log_probs(2, 3, &mut rng(1));
    let out = ctc_loss(&lp, 3, &t).unwrap();
    assert!(!out.feasible && out.nll.is_infinite());
    assert!(out.grad.iter().all(|g| *g == 0.0));
}

#[test]
fn vocab_round_trip() {
    let v = TokenVocab::letters(4);
    let l = v.encode("ab dc").unwrap();
    assert_eq!(v.decode(&l), "ab dc");
    assert!(v.encode("z").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nll_is_non_negative_and_gradient_rows_sum_to_zero(seed in any::<u64>()) {
        let (lp, v, target) = ctc_instance(&mut rng(seed));
        let out = ctc_loss(&lp, v, &target).unwrap();
        prop_assert!(out.nll >= -1e-12);
        // Gradient w.r.t. normalised log-probs is -posterior, rows sum to -1.
        for row in out.grad.chunks(v) {
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_decode_is_collapse_of_argmax(seed in any::<u64>()) {
        let mut r = rng(seed);
        let lp = random_log_probs(6, 4, &mut r);
        let path: Vec<usize> = lp
            .chunks(4)
            .map(|row| (0..4).fold(0, |a, j| if row[j] > row[a] { j } else { a }))
            .collect();
        prop_assert_eq!(ctc_greedy_decode(&lp, 4), collapse(&path));
    }

    #[test]
    fn enumeration_matches_on_single_instances(seed in any::<u64>()) {
        let (lp, v, target) = ctc_instance(&mut rng(seed));
        let a = ctc_loss(&lp, v, &target).unwrap().nll;
        let b = ctc_brute_force(&lp, v, &target).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }
}
