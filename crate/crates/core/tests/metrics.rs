use std::collections::HashMap;

use fidelity_lab::metrics::{
    bleu, exact_match_rate, normalize_text, substring_match, BLEU_EPSILON,
};
use proptest::prelude::*;

/// Plain sentence BLEU-4: clipped n-gram precisions, geometric mean, brevity penalty.
fn reference_bleu(cand: &[u32], reference: &[u32]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let grams = |s: &[u32]| {
            let mut m: HashMap<Vec<u32>, usize> = HashMap::new();
            if s.len() >= n {
                for w in s.windows(n) {
                    *m.entry(w.to_vec()).or_default() += 1;
                }
            }
            m
        };
        let (c, r) = (grams(cand), grams(reference));
        let total: usize = c.values().sum();
        let hits: usize = c
            .iter()
            .map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if hits == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            hits as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

#[test]
fn hand_counted_example() {
    let cand = [1, 2, 3, 4, 5, 6];
    let reference = [1, 2, 3, 4, 7, 8];
    let s = bleu(&cand, &reference).unwrap();
    let hand = (4.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0f64).powf(0.25);
    assert!((s.score - 0.5081).abs() < 1e-4);
    assert!((s.score - hand).abs() < 1e-12);
    assert_eq!(s.precisions, [4.0 / 6.0, 3.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0]);
    assert_eq!(s.brevity_penalty, 1.0);
    assert!((s.score - reference_bleu(&cand, &reference)).abs() < 1e-12);
}

#[test]
fn identity_and_empty() {
    let r = [3, 1, 4, 1, 5, 9];
    assert_eq!(bleu(&r, &r).unwrap().score, 1.0);
    assert_eq!(bleu(&[], &r).unwrap().score, 0.0);
}

proptest! {
    #[test]
    fn matches_reference_implementation(
        cand in prop::collection::vec(0u32..6, 0..14),
        reference in prop::collection::vec(0u32..6, 1..14),
    ) {
        let s = bleu(&cand, &reference).unwrap().score;
        prop_assert!((0.0..=1.0).contains(&s));
        let want = reference_bleu(&cand, &reference);
        prop_assert!((s - want).abs() <= 1e-12 * want.max(1.0), "{s} vs {want}");
    }

    #[test]
    fn normalization_is_idempotent(s in "[ A-Za-z.!,-]{0,30}") {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once);
    }
}

#[test]
fn normalization_examples() {
    assert_eq!(normalize_text("  The  Bee. "), "the bee");
    assert_eq!(normalize_text("Blue-Banded   BEE!"), "blue-banded bee");
    assert_eq!(normalize_text("the bee"), "the bee");
}

#[test]
fn substring_examples() {
    assert!(substring_match("the blue-banded bee shakes pollen", "blue-banded bee").unwrap());
    assert!(!substring_match("the honey bee shakes pollen", "blue-banded bee").unwrap());
    assert!(substring_match("blue-banded bee", "blue-banded bee").unwrap());
    assert!(substring_match("anything", "  ").is_err());
}

#[test]
fn exact_match_counts_sequences() {
    let pairs = vec![
        (vec![1, 2], vec![1, 2]),
        (vec![1], vec![1, 2]),
        (vec![], vec![3]),
    ];
    assert!((exact_match_rate(&pairs) - 1.0 / 3.0).abs() < 1e-15);
}
