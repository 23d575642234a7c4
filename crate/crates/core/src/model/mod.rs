//! Compressor/decoder pair with a memory-token interface.
//!
//! The compressor reads `x ++ [MEM]·M` causally and exports the final hidden states of
//! the `M` memory positions (projected to the decoder width) as the latent `Z`. The
//! decoder consumes `Z` as `M` soft prefix embeddings followed by ordinary token
//! embeddings, and is otherwise a causal language model.
//!
//! Everything downstream (training, diagnostics, evaluation) talks to a model through
//! the [`CompressorDecoder`] trait, so the scripted oracles in [`scripted`] can stand in
//! for a trained network.

pub mod checkpoint;
mod network;
pub mod scripted;
pub mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use network::{CompressionModel, ForwardCache, ParameterSet};

use crate::tensor::{log_softmax, Matrix};
use crate::vocab::{TokenId, TokenSequence, VocabError, Vocabulary, BOS, EOS, SEP};

/// Next-token logits, one row per input position, in double precision.
pub type LogitMatrix = Matrix<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} positions exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid token: {0}")]
    InvalidToken(#[from] VocabError),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("candidate answer is empty")]
    EmptyCandidate,
    #[error(
        "source of {len} tokens is too short for {slots} memory slots (need at least {needed})"
    )]
    SourceTooShort {
        len: usize,
        slots: usize,
        needed: usize,
    },
    #[error("memory tensor contains non-finite values")]
    NonFiniteMemory,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Compressor,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub role: Role,
}

impl ModelConfig {
    pub fn new(
        role: Role,
        vocab_size: usize,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        max_positions: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size,
            max_positions,
            role,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_positions,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{:?} config fields must all be >= 1",
                self.role
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Number of memory slots `M`.
    pub memory_slots: usize,
    /// Training source length `L`; the compression rate is `L / M`.
    pub source_length: usize,
    /// Whether a trained linear projector maps compressor width to decoder width.
    /// Required when the widths differ.
    pub projector: bool,
}

impl CompressionConfig {
    /// Slots for a source of `source_length` tokens at `rate`× compression.
    pub fn for_rate(source_length: usize, rate: usize) -> Result<Self, ModelError> {
        if rate == 0 || source_length % rate != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "rate {rate} does not divide source length {source_length}"
            )));
        }
        let cfg = Self {
            memory_slots: source_length / rate,
            source_length,
            projector: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(L, M)`, the compression rate as an exact ratio.
    pub fn rate_ratio(&self) -> (usize, usize) {
        (self.source_length, self.memory_slots)
    }

    pub fn rate(&self) -> f64 {
        self.source_length as f64 / self.memory_slots as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.memory_slots == 0 {
            return Err(ModelError::InvalidConfig(
                "memory_slots must be >= 1".into(),
            ));
        }
        if 2 * self.memory_slots > self.source_length {
            return Err(ModelError::InvalidConfig(format!(
                "{} memory slots is not a compression of {} tokens (need M <= L/2)",
                self.memory_slots, self.source_length
            )));
        }
        Ok(())
    }
}

/// The latent `Z` (M × d_decoder) handed from compressor to decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTensor {
    values: Matrix<f64>,
    source_length: usize,
}

impl MemoryTensor {
    pub fn new(values: Matrix<f64>, source_length: usize) -> Result<Self, ModelError> {
        if !values.is_finite() {
            return Err(ModelError::NonFiniteMemory);
        }
        Ok(Self {
            values,
            source_length,
        })
    }

    pub fn values(&self) -> &Matrix<f64> {
        &self.values
    }

    pub fn slots(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn source_length(&self) -> usize {
        self.source_length
    }

    /// Row-major flattening to a single `M·d` vector.
    pub fn flatten(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Anything that can compress a token sequence into memory slots and decode from them.
pub trait CompressorDecoder: Sync {
    fn vocabulary(&self) -> &Vocabulary;

    fn compress(&self, x: &TokenSequence) -> Result<MemoryTensor, ModelError>;

    /// Logits for the token following each position of `input`, with the decoder
    /// conditioned on `z` as a soft prefix. Row `t` depends only on `z` and `input[..=t]`.
    fn next_token_logits(
        &self,
        z: &MemoryTensor,
        input: &[TokenId],
    ) -> Result<LogitMatrix, ModelError>;

    /// Largest `input` length accepted by [`Self::next_token_logits`] for a memory of
    /// `slots` rows.
    fn max_input_len(&self, slots: usize) -> usize;
}

/// Teacher-forced logits for `prefix`: row `t` is the distribution over `prefix[t]`
/// given `Z`, BOS and `prefix[..t]`.
pub fn decode_logits<M: CompressorDecoder + ?Sized>(
    model: &M,
    z: &MemoryTensor,
    prefix: &TokenSequence,
) -> Result<LogitMatrix, ModelError> {
    let ids = prefix.ids();
    model.vocabulary().check(ids)?;
    let mut input = Vec::with_capacity(ids.len());
    input.push(BOS);
    input.extend_from_slice(&ids[..ids.len() - 1]);
    model.next_token_logits(z, &input)
}

/// Free-running argmax decoding from `Z` after BOS. The result excludes BOS and stops
/// before the first EOS.
pub fn generate_greedy<M: CompressorDecoder + ?Sized>(
    model: &M,
    z: &MemoryTensor,
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    generate_from(model, z, &[BOS], max_len)
}

/// Greedy continuation of an arbitrary prompt (e.g. `[SEP, question…, SEP]`).
/// Generation also stops when the decoder context is full.
pub fn generate_from<M: CompressorDecoder + ?Sized>(
    model: &M,
    z: &MemoryTensor,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    if max_len == 0 {
        return Err(ModelError::InvalidConfig("max_len must be >= 1".into()));
    }
    let limit = model.max_input_len(z.slots());
    if prompt.len() > limit {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len(),
            max: limit,
        });
    }
    let mut input = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.next_token_logits(z, &input)?;
        let next = argmax(logits.row(logits.rows() - 1)) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        if input.len() == limit {
            break;
        }
        input.push(next);
    }
    Ok(out)
}

/// QA prompt `[SEP, question…, SEP]`.
pub fn qa_prompt(question: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(question.len() + 2);
    p.push(SEP);
    p.extend_from_slice(question);
    p.push(SEP);
    p
}

/// Mean per-token log-probability of `candidate` after `[Z; SEP; question; SEP]`.
pub fn score_candidate<M: CompressorDecoder + ?Sized>(
    model: &M,
    z: &MemoryTensor,
    question: &[TokenId],
    candidate: &[TokenId],
) -> Result<f64, ModelError> {
    if candidate.is_empty() {
        return Err(ModelError::EmptyCandidate);
    }
    model.vocabulary().check(question)?;
    model.vocabulary().check(candidate)?;
    let mut input = qa_prompt(question);
    let first_row = input.len() - 1;
    input.extend_from_slice(&candidate[..candidate.len() - 1]);
    let logits = model.next_token_logits(z, &input)?;
    let total: f64 = candidate
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax(logits.row(first_row + i))[tok as usize])
        .sum();
    Ok(total / candidate.len() as f64)
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::scripted::{ScriptedModel, StepDistribution};
    use super::*;

    #[test]
    fn compression_config_rates() {
        let c = CompressionConfig::for_rate(64, 4).unwrap();
        assert_eq!(c.memory_slots, 16);
        assert_eq!(c.rate_ratio(), (64, 16));
        assert_eq!(CompressionConfig::for_rate(64, 64).unwrap().memory_slots, 1);
        assert!(CompressionConfig::for_rate(64, 1).is_err());
        assert!(CompressionConfig::for_rate(64, 3).is_err());
        let bad = CompressionConfig {
            memory_slots: 5,
            source_length: 8,
            projector: true,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_config_validation() {
        assert!(ModelConfig::new(Role::Decoder, 64, 2, 4, 32, 64, 64)
            .validate()
            .is_ok());
        assert!(ModelConfig::new(Role::Decoder, 64, 2, 5, 32, 64, 64)
            .validate()
            .is_err());
        assert!(ModelConfig::new(Role::Decoder, 64, 0, 4, 32, 64, 64)
            .validate()
            .is_err());
    }

    #[test]
    fn uniform_decoder_scores_minus_ln_vocab() {
        let m = ScriptedModel::new(Vocabulary::synthetic(64), StepDistribution::Uniform);
        let x = TokenSequence::new(vec![7; 8]).unwrap();
        let z = m.compress(&x).unwrap();
        let s = score_candidate(&m, &z, &[9, 10], &[11, 12, 13]).unwrap();
        assert!((s + 64f64.ln()).abs() < 1e-12);
        assert_eq!(
            score_candidate(&m, &z, &[9], &[]),
            Err(ModelError::EmptyCandidate)
        );
    }

    #[test]
    fn eos_decoder_generates_nothing() {
        let m = ScriptedModel::new(Vocabulary::synthetic(16), StepDistribution::Constant(EOS));
        let z = m
            .compress(&TokenSequence::new(vec![6, 7, 8, 9]).unwrap())
            .unwrap();
        assert!(generate_greedy(&m, &z, 10).unwrap().is_empty());
    }

    #[test]
    fn hand_computed_candidate_scores() {
        // Per-step probabilities for tokens 6 and 7 are fixed by the script.
        let probs = vec![(6, 0.5), (7, 0.25)];
        let m = ScriptedModel::new(Vocabulary::synthetic(16), StepDistribution::Weighted(probs));
        let z = m
            .compress(&TokenSequence::new(vec![6, 7, 8, 9]).unwrap())
            .unwrap();
        let a = score_candidate(&m, &z, &[8], &[6, 6]).unwrap();
        let b = score_candidate(&m, &z, &[8], &[6, 7]).unwrap();
        assert!((a - 0.5f64.ln()).abs() < 1e-12);
        assert!((b - (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
    }
}
