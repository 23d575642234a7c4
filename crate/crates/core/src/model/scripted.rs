//! Scripted compressor/decoder oracles with hand-specified output distributions.
//!
//! A scripted model "compresses" by storing the source ids verbatim in `Z` (one row per
//! token), so decoders that read `Z` can reproduce or quote the context exactly. These
//! oracles pin down the evaluators and diagnostics independently of any training run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CompressorDecoder, LogitMatrix, MemoryTensor, ModelError};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, TokenSequence, Vocabulary, BOS, EOS, SEP};

/// Logit assigned to tokens that must receive zero probability. Large enough that
/// `exp` underflows to exactly zero while staying finite in single precision.
pub const IMPOSSIBLE: f64 = -1e30;

/// Mass left over for tokens outside a substring continuation in [`StepDistribution::Verbatim`].
pub const VERBATIM_LEAK: f64 = 1e-6;

/// What the scripted decoder predicts at every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "params")]
pub enum StepDistribution {
    /// Uniform over the whole vocabulary.
    Uniform,
    /// Probability one on a single token.
    Constant(TokenId),
    /// Listed `(token, probability)` pairs; leftover mass is spread uniformly over the
    /// unlisted tokens.
    Weighted(Vec<(TokenId, f64)>),
    /// Probability one on the next source token (positional copy), then EOS.
    ExactCopy,
    /// Quotes the context: probability concentrates on tokens that extend the answer so
    /// far as a contiguous substring of the source, preferring the verbatim path from
    /// the first source token. Emits EOS once the full source has been reproduced.
    Verbatim,
    /// Ignores `Z`; answers each known question with its stored world-true answer then
    /// EOS, and is uniform elsewhere.
    Prior(Vec<(Vec<TokenId>, Vec<TokenId>)>),
}

#[derive(Clone, Debug)]
pub struct ScriptedModel {
    vocab: Vocabulary,
    behavior: StepDistribution,
    prior_index: HashMap<Vec<TokenId>, Vec<TokenId>>,
}

impl ScriptedModel {
    pub fn new(vocab: Vocabulary, behavior: StepDistribution) -> Self {
        let prior_index = match &behavior {
            StepDistribution::Prior(pairs) => pairs.iter().cloned().collect(),
            _ => HashMap::new(),
        };
        Self {
            vocab,
            behavior,
            prior_index,
        }
    }

    pub fn behavior(&self) -> &StepDistribution {
        &self.behavior
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn one_hot(&self, tok: TokenId) -> Vec<f64> {
        let mut row = vec![IMPOSSIBLE; self.vocab.len()];
        row[tok as usize] = 0.0;
        row
    }

    fn from_probs(&self, probs: &[(TokenId, f64)]) -> Vec<f64> {
        let v = self.vocab.len();
        let listed: f64 = probs.iter().map(|(_, p)| p).sum();
        let n_unlisted = v - probs.len();
        let rest = if n_unlisted > 0 && listed < 1.0 {
            ((1.0 - listed) / n_unlisted as f64).ln()
        } else {
            IMPOSSIBLE
        };
        let mut row = vec![rest; v];
        for &(tok, p) in probs {
            row[tok as usize] = if p > 0.0 { p.ln() } else { IMPOSSIBLE };
        }
        row
    }

    fn verbatim_row(&self, source: &[TokenId], partial: &[TokenId]) -> Vec<f64> {
        let j = partial.len();
        let mut weights: HashMap<TokenId, f64> = HashMap::new();
        if j <= source.len() {
            for i in 0..=source.len() - j {
                if source[i..i + j] != *partial {
                    continue;
                }
                let next = source.get(i + j).copied().unwrap_or(EOS);
                let w = if i == 0 { source.len() as f64 } else { 1.0 };
                *weights.entry(next).or_insert(0.0) += w;
            }
        }
        if weights.is_empty() {
            return vec![0.0; self.vocab.len()];
        }
        let total: f64 = weights.values().sum();
        let mut probs: Vec<(TokenId, f64)> = weights
            .into_iter()
            .map(|(t, w)| (t, (1.0 - VERBATIM_LEAK) * w / total))
            .collect();
        probs.sort_by_key(|(t, _)| *t);
        self.from_probs(&probs)
    }

    fn row_for(
        &self,
        source: &[TokenId],
        question: Option<&[TokenId]>,
        partial: &[TokenId],
    ) -> Vec<f64> {
        match &self.behavior {
            StepDistribution::Uniform => vec![0.0; self.vocab.len()],
            StepDistribution::Constant(tok) => self.one_hot(*tok),
            StepDistribution::Weighted(probs) => self.from_probs(probs),
            StepDistribution::ExactCopy => {
                self.one_hot(source.get(partial.len()).copied().unwrap_or(EOS))
            }
            StepDistribution::Verbatim => self.verbatim_row(source, partial),
            StepDistribution::Prior(_) => match question.and_then(|q| self.prior_index.get(q)) {
                Some(answer) => self.one_hot(answer.get(partial.len()).copied().unwrap_or(EOS)),
                None if question.is_none() => self.one_hot(EOS),
                None => vec![0.0; self.vocab.len()],
            },
        }
    }
}

fn source_of(z: &MemoryTensor) -> Vec<TokenId> {
    z.values()
        .as_slice()
        .iter()
        .map(|&v| v as TokenId)
        .collect()
}

impl CompressorDecoder for ScriptedModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn compress(&self, x: &TokenSequence) -> Result<MemoryTensor, ModelError> {
        self.vocab.check(x.ids())?;
        let values = Matrix::from_vec(x.len(), 1, x.ids().iter().map(|&t| t as f64).collect());
        MemoryTensor::new(values, x.len())
    }

    fn next_token_logits(
        &self,
        z: &MemoryTensor,
        input: &[TokenId],
    ) -> Result<LogitMatrix, ModelError> {
        self.vocab.check(input)?;
        let source = source_of(z);
        // Answer tokens start after BOS, or after the closing SEP of a QA prompt.
        let (answer_start, question) = match input.first() {
            Some(&SEP) => match input[1..].iter().position(|&t| t == SEP) {
                Some(p) => (p + 2, Some(&input[1..p + 1])),
                None => (usize::MAX, None),
            },
            Some(&BOS) => (1, None),
            _ => (usize::MAX, None),
        };
        let v = self.vocab.len();
        let mut data = Vec::with_capacity(input.len() * v);
        for t in 0..input.len() {
            if t + 1 >= answer_start {
                data.extend(self.row_for(&source, question, &input[answer_start..=t]));
            } else {
                data.extend(std::iter::repeat(0.0).take(v));
            }
        }
        Ok(Matrix::from_vec(input.len(), v, data))
    }

    fn max_input_len(&self, _slots: usize) -> usize {
        usize::MAX
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_logits, generate_from, generate_greedy, qa_prompt, score_candidate};
    use crate::tensor::log_softmax;

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic(20)
    }

    #[test]
    fn exact_copy_reproduces_source_with_probability_one() {
        let m = ScriptedModel::new(vocab(), StepDistribution::ExactCopy);
        let x = TokenSequence::new(vec![6, 9, 9, 12, 7]).unwrap();
        let z = m.compress(&x).unwrap();
        assert_eq!(generate_greedy(&m, &z, 50).unwrap(), x.ids());
        let logits = decode_logits(&m, &z, &x).unwrap();
        for (t, &tok) in x.ids().iter().enumerate() {
            assert_eq!(log_softmax(logits.row(t))[tok as usize], 0.0);
        }
    }

    #[test]
    fn verbatim_quotes_context_and_prefers_substrings() {
        let m = ScriptedModel::new(vocab(), StepDistribution::Verbatim);
        let x = TokenSequence::new(vec![6, 7, 8, 9, 10, 11]).unwrap();
        let z = m.compress(&x).unwrap();
        let q = [12, 13];
        assert_eq!(generate_from(&m, &z, &qa_prompt(&q), 50).unwrap(), x.ids());
        let inside = score_candidate(&m, &z, &q, &[9, 10]).unwrap();
        let outside = score_candidate(&m, &z, &q, &[15]).unwrap();
        assert!(inside > outside);
    }

    #[test]
    fn prior_answers_known_questions_only() {
        let q = vec![12, 13];
        let m = ScriptedModel::new(
            vocab(),
            StepDistribution::Prior(vec![(q.clone(), vec![15, 16])]),
        );
        let z = m
            .compress(&TokenSequence::new(vec![6, 7, 8, 9]).unwrap())
            .unwrap();
        assert_eq!(
            generate_from(&m, &z, &qa_prompt(&q), 10).unwrap(),
            vec![15, 16]
        );
        assert_eq!(score_candidate(&m, &z, &q, &[15, 16]).unwrap(), 0.0);
        assert!(score_candidate(&m, &z, &q, &[6]).unwrap() < -1e20);
    }
}
