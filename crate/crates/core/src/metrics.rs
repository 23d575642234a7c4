//! Reconstruction and answer-matching metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenId;

/// Replacement for a zero clipped n-gram count.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("gold answer is empty after normalization")]
    EmptyGold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; BLEU_MAX_ORDER],
    /// `exp(1 − r/c)` for `c < r`, else 1; reported as 0 for an empty candidate.
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 with uniform weights over token ids.
pub fn bleu(candidate: &[TokenId], reference: &[TokenId]) -> Result<BleuScore, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let mut precisions = [0.0; BLEU_MAX_ORDER];
    if candidate.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            precisions,
            brevity_penalty: 0.0,
        });
    }
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let total = candidate.len().saturating_sub(n - 1);
        let refs = ngram_counts(reference, n);
        let matched: usize = ngram_counts(candidate, n)
            .into_iter()
            .map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        *p = if matched == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity_penalty = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_ORDER as f64;
    Ok(BleuScore {
        score: (brevity_penalty * log_mean.exp()).min(1.0),
        precisions,
        brevity_penalty,
    })
}

/// Mean of sentence BLEU scores over `(candidate, reference)` pairs; 0 for no pairs.
pub fn mean_bleu<'a, I>(pairs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for (c, r) in pairs {
        sum += bleu(c, r)?.score;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Lowercases, collapses whitespace and strips punctuation at both ends of every
/// whitespace-separated token. Internal punctuation such as hyphens is kept.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether the normalized gold answer occurs contiguously in the normalized output.
/// Matching is on whole tokens, so `bee` does not match inside `beetle`.
pub fn substring_match(generated: &str, gold: &str) -> Result<bool, MetricsError> {
    let gold = normalize_text(gold);
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    Ok(contains_phrase(&normalize_text(generated), &gold))
}

/// Token-contiguous containment of `needle` in `haystack`, both space-separated.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let hay: Vec<&str> = haystack.split(' ').filter(|w| !w.is_empty()).collect();
    let pat: Vec<&str> = needle.split(' ').filter(|w| !w.is_empty()).collect();
    !pat.is_empty() && hay.windows(pat.len()).any(|w| w == pat.as_slice())
}

/// Fraction of pairs whose candidate equals the reference token for token.
pub fn exact_match_rate(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(c, r)| c == r).count() as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_empty() {
        let x = [1, 2, 3, 4, 5];
        assert_eq!(bleu(&x, &x).unwrap().score, 1.0);
        assert_eq!(bleu(&[], &x).unwrap().score, 0.0);
        assert_eq!(bleu(&x, &[]), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let b = bleu(&[1, 2, 3, 4], &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!((b.brevity_penalty - (-1f64).exp()).abs() < 1e-15);
        assert!((b.score - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("  The  Bee. "), "the bee");
        assert_eq!(normalize_text("Blue-Banded   BEE!"), "blue-banded bee");
        assert_eq!(normalize_text("the bee"), "the bee");
        assert_eq!(substring_match("x", " ... "), Err(MetricsError::EmptyGold));
        assert!(!substring_match("the beetle hit bob", "the bee").unwrap());
        assert!(substring_match("The Bee, hit bob", "the bee").unwrap());
    }
}
