use std::f64::consts::PI;

use fidelity_lab::analysis::{
    correlate, correlation_p_value, decoupling_report, pearson, quantile_bands, spearman,
    RunSummary,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_computed_correlations() {
    let (r, _) = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
    assert!((r - 0.6).abs() < 1e-12);
    let (rho, _) = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    // ranks (1, 2.5, 2.5, 4) and (1, 3, 2, 4): cov 4.5 over sqrt(4.5 · 5)
    assert!((rho - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    let x = [0.5, 1.0, 2.0, 3.5, 5.0];
    let line: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((pearson(&x, &line).unwrap().0 - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap().0 + 1.0).abs() < 1e-12);
    let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    assert_eq!(spearman(&x, &ex).unwrap().0, 1.0);
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    assert_eq!(spearman(&x, &rev).unwrap().0, -1.0);
}

/// Closed-form Student-t CDFs for small degrees of freedom.
fn t_cdf(t: f64, df: usize) -> f64 {
    match df {
        1 => 0.5 + t.atan() / PI,
        2 => 0.5 + t / (2.0 * (2.0 + t * t).sqrt()),
        3 => {
            let u = t / 3f64.sqrt();
            0.5 + ((u / (1.0 + u * u)) + u.atan()) / PI
        }
        4 => {
            let s = t * t / (4.0 + t * t);
            0.5 + 0.5 * s.sqrt() * (1.0 + 0.5 * (1.0 - s)) * t.signum()
        }
        _ => unreachable!(),
    }
}

#[test]
fn p_values_match_closed_form_t() {
    for df in 1..=4 {
        for r in [-0.95, -0.6, -0.1, 0.0, 0.3, 0.7, 0.99] {
            let t: f64 = r * (df as f64 / (1.0 - r * r)).sqrt();
            let want = 2.0 * (1.0 - t_cdf(t.abs(), df));
            let got = correlation_p_value(r, df + 2);
            assert!((got - want).abs() < 1e-9, "df {df} r {r}: {got} vs {want}");
        }
    }
    assert_eq!(correlation_p_value(1.0, 5), 0.0);
}

#[test]
fn spearman_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = rng.gen_range(5..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
        let base = spearman(&x, &y).unwrap().0;
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let fy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        assert_eq!(spearman(&fx, &fy).unwrap().0, base);
    }
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_symmetric(
        pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30)
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Ok(c) = correlate(&x, &y) {
            prop_assert!(c.pearson_r.abs() <= 1.0 && c.spearman_rho.abs() <= 1.0);
            prop_assert!((0.0..=1.0).contains(&c.pearson_p) && (0.0..=1.0).contains(&c.spearman_p));
            let d = correlate(&y, &x).unwrap();
            prop_assert!((c.pearson_r - d.pearson_r).abs() < 1e-12);
            prop_assert_eq!(c.spearman_rho, d.spearman_rho);
        }
    }

    #[test]
    fn bands_partition_the_data(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40),
        bins in 1usize..6,
    ) {
        prop_assume!(pts.len() >= bins);
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let bands = quantile_bands(&x, &y, bins).unwrap();
        prop_assert_eq!(bands.iter().map(|b| b.count).sum::<usize>(), x.len());
        for b in &bands {
            prop_assert!(b.q25 <= b.q75 + 1e-12);
        }
        for w in bands.windows(2) {
            prop_assert!(w[0].center <= w[1].center);
        }
    }
}

#[test]
fn band_examples() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let y = [4.0, 1.0, 3.0, 2.0, 10.0, 30.0, 20.0, 40.0];
    let bands = quantile_bands(&x, &y, 2).unwrap();
    // bin 1: sorted y (1, 2, 3, 4): q25 at position 0.75 → 1.75, q75 at 2.25 → 3.25
    assert_eq!(
        (bands[0].center, bands[0].mean, bands[0].q25, bands[0].q75),
        (2.5, 2.5, 1.75, 3.25)
    );
    // bin 2: sorted y (10, 20, 30, 40): 17.5 and 32.5
    assert_eq!(
        (bands[1].center, bands[1].mean, bands[1].q25, bands[1].q75),
        (6.5, 25.0, 17.5, 32.5)
    );
    let flat = quantile_bands(&x, &[3.0; 8], 3).unwrap();
    assert!(flat
        .iter()
        .all(|b| b.mean == 3.0 && b.q25 == 3.0 && b.q75 == 3.0));
    let one = quantile_bands(&x, &y, 1).unwrap();
    assert_eq!((one.len(), one[0].count), (1, 8));
}

fn run(label: &str, bleu: f64, ow: Option<f64>) -> RunSummary {
    RunSummary {
        label: label.into(),
        bleu,
        qa_overwrite: ow,
        qa_drift: None,
    }
}

#[test]
fn decoupling_examples() {
    let flagged = decoupling_report(
        &[run("0.6b", 0.95, Some(0.71)), run("32b", 0.97, Some(0.68))],
        0.02,
    )
    .unwrap();
    assert_eq!(flagged.flags.len(), 1);
    assert_eq!(
        (flagged.flags[0].from.as_str(), flagged.flags[0].to.as_str()),
        ("0.6b", "32b")
    );
    let same =
        decoupling_report(&[run("a", 0.9, Some(0.7)), run("b", 0.9, Some(0.7))], 0.02).unwrap();
    assert!(same.flags.is_empty());
    let better = decoupling_report(
        &[
            run("a", 0.8, Some(0.6)),
            run("b", 0.9, Some(0.7)),
            run("c", 0.95, Some(0.8)),
        ],
        0.0,
    )
    .unwrap();
    assert!(better.flags.is_empty());
    let absent = decoupling_report(&[run("a", 0.8, None), run("b", 0.9, Some(0.1))], 0.0).unwrap();
    assert!(absent.flags.is_empty());
}
