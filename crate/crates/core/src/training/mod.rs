//! Reconstruction + continuation objective and the optimizer loop.
//!
//! For a sample `x` of length `n` split at `k`, the compressor sees only `x_{1:k}` and
//! the decoder is scored on the whole sequence under teacher forcing:
//!
//! ```text
//! L_re = −Σ_{t ≤ k} ln P(x_t | x_<t, Z)      L_nt = −Σ_{t > k} ln P(x_t | x_<t, Z)
//! ```
//!
//! Losses are summed over the tokens of a sample and averaged over the batch.

mod optim;
mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{Adam, LrSchedule};
pub use run::{
    read_metrics_csv, run_training, write_metrics_csv, DynamicsRecord, NoHooks, QaProbe, StepLoss,
    TrainHooks, TrainingRun, METRICS_HEADER,
};

use crate::model::checkpoint::CheckpointError;
use crate::model::{decode_logits, CompressionModel, CompressorDecoder, ModelError};
use crate::tensor::log_softmax;
use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid sample: split {k} outside 1..={n}")]
    InvalidSplit { k: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diagnostics(#[from] crate::diagnostics::DiagnosticsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("step {step}: {source}")]
    AtStep { step: u64, source: Box<TrainError> },
}

impl TrainError {
    /// Innermost error, looking through `AtStep`.
    pub fn root(&self) -> &TrainError {
        match self {
            Self::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn failing_step(&self) -> Option<u64> {
        match self {
            Self::AtStep { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Sequence `x` with split `k`: `x_{1:k}` is compressed and reconstructed, the rest is
/// the continuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionSample {
    pub x: TokenSequence,
    pub k: usize,
}

impl CompressionSample {
    pub fn new(x: TokenSequence, k: usize) -> Result<Self, TrainError> {
        if k == 0 || k > x.len() {
            return Err(TrainError::InvalidSplit { k, n: x.len() });
        }
        Ok(Self { x, k })
    }

    /// Uses the default split `k = ⌈0.75·n⌉`.
    pub fn with_default_split(x: TokenSequence) -> Self {
        let k = default_split(x.len());
        Self { x, k }
    }

    pub fn prefix(&self) -> TokenSequence {
        self.x.prefix(self.k).expect("k >= 1")
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `⌈0.75·n⌉`.
pub fn default_split(n: usize) -> usize {
    (3 * n).div_ceil(4)
}

/// Longest `n` whose default split is exactly `prefix_len`.
pub fn window_for_prefix(prefix_len: usize) -> usize {
    (4 * prefix_len) / 3
}

/// Cuts a token stream into consecutive non-overlapping windows of `n` tokens with
/// split `k`; the trailing remainder is dropped.
pub fn windows(
    stream: &[TokenId],
    n: usize,
    k: usize,
) -> Result<Vec<CompressionSample>, TrainError> {
    if n == 0 || k == 0 || k > n {
        return Err(TrainError::InvalidSplit { k, n });
    }
    stream
        .chunks_exact(n)
        .map(|w| {
            CompressionSample::new(TokenSequence::new(w.to_vec()).expect("non-empty window"), k)
        })
        .collect()
}

/// Seeded permutation of `samples` split into `(train, probe)` with `probe_size`
/// probe samples. Both halves keep their permuted order.
pub fn split_probe(
    samples: Vec<CompressionSample>,
    probe_size: usize,
    seed: u64,
) -> Result<(Vec<CompressionSample>, Vec<CompressionSample>), TrainError> {
    if probe_size >= samples.len() {
        return Err(TrainError::InvalidConfig(format!(
            "probe set of {probe_size} leaves no training samples out of {}",
            samples.len()
        )));
    }
    let mut samples = samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = samples.split_off(probe_size);
    Ok((train, samples))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub re: f64,
    pub nt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(re: f64, nt: f64) -> Self {
        Self {
            re,
            nt,
            total: re + nt,
        }
    }

    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len() as f64;
        let re = items.iter().map(|l| l.re).sum::<f64>() / n;
        let nt = items.iter().map(|l| l.nt).sum::<f64>() / n;
        Self::new(re, nt)
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.nt.is_finite()
    }
}

/// Loss of one sample under any compressor/decoder, via teacher-forced logits.
pub fn total_loss<M: CompressorDecoder + ?Sized>(
    model: &M,
    sample: &CompressionSample,
) -> Result<LossBreakdown, ModelError> {
    let z = model.compress(&sample.prefix())?;
    let logits = decode_logits(model, &z, &sample.x)?;
    let (mut re, mut nt) = (0.0, 0.0);
    for (t, &tok) in sample.x.ids().iter().enumerate() {
        let nll = -log_softmax(logits.row(t))[tok as usize];
        if t < sample.k {
            re += nll;
        } else {
            nt += nll;
        }
    }
    Ok(LossBreakdown::new(re, nt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Learning rate reached at the end of the cosine decay.
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub checkpoint_interval: u64,
    pub probe_interval: u64,
    pub probe_size: usize,
    pub seed: u64,
    pub freeze_decoder: bool,
    /// Draw a fresh permutation every epoch instead of repeating the first one.
    pub reshuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 8,
            warmup_steps: 100,
            peak_lr: 3e-3,
            final_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            checkpoint_interval: 750,
            probe_interval: 750,
            probe_size: 32,
            seed: 0,
            freeze_decoder: false,
            reshuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.checkpoint_interval == 0 || self.probe_interval == 0 {
            return bad("checkpoint and probe intervals must be >= 1".into());
        }
        if !(self.peak_lr >= 0.0 && self.final_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam hyperparameters out of range".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            peak: self.peak_lr,
            floor: self.final_lr,
        }
    }
}

/// One optimizer step on the mean batch loss. Returns the pre-update loss; on a
/// non-finite gradient the parameters and optimizer state are left untouched.
pub fn train_step(
    model: &mut CompressionModel<f32>,
    batch: &[CompressionSample],
    opt: &mut Adam,
) -> Result<LossBreakdown, TrainError> {
    use rayon::prelude::*;

    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let shared = &*model;
    let per_sample: Vec<_> = batch
        .par_iter()
        .map(|s| shared.loss_and_grad(s.x.ids(), s.k))
        .collect::<Result<_, _>>()?;
    let mut iter = per_sample.into_iter();
    let ((re, nt), mut grads) = iter.next().expect("non-empty batch");
    let mut losses = vec![LossBreakdown::new(re, nt)];
    for ((re, nt), g) in iter {
        grads.add_assign(&g);
        losses.push(LossBreakdown::new(re, nt));
    }
    grads.scale(1.0 / batch.len() as f32);
    let loss = LossBreakdown::mean(&losses);
    if !grads.is_finite() || !loss.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    opt.step(&mut model.params, &mut grads);
    Ok(loss)
}
