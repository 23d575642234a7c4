//! Mechanistic probes on compressed memories.
//!
//! * Effective rank of a batch of memories: `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσⱼ` over
//!   the singular values of the batch matrix (each sample's `M × d` latent flattened to
//!   one row of width `M·d`).
//! * Conditional entropy of the decoder's next-token distributions under teacher
//!   forcing, averaged over the reconstruction positions.

pub mod dump;

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{decode_logits, CompressorDecoder, MemoryTensor, ModelError};
use crate::tensor::log_softmax;
use crate::training::CompressionSample;
use crate::vocab::TokenSequence;

/// Singular values below `SPECTRUM_FLOOR · σ_max` are discarded.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("batch matrix is numerically zero")]
    ZeroMatrix,
    #[error("effective rank needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid batch matrix: {0}")]
    InvalidMatrix(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("probe set is empty")]
    EmptyProbeSet,
}

impl DiagnosticsError {
    pub fn is_checksum_mismatch(&self) -> bool {
        matches!(
            self,
            Self::Checkpoint {
                source: CheckpointError::ChecksumMismatch { .. },
                ..
            }
        )
    }
}

/// How a batch of `M × d` memories becomes a matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchLayout {
    /// One row of width `M·d` per sample (`B × M·d`).
    #[default]
    Flatten,
    /// The `M` rows of every sample stacked (`B·M × d`).
    Stack,
}

/// Row-major `B × D` batch of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddingMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl BatchEmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if values.len() != rows * cols {
            return Err(DiagnosticsError::InvalidMatrix(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if rows < 2 {
            return Err(DiagnosticsError::DegenerateBatch(rows));
        }
        if cols == 0 {
            return Err(DiagnosticsError::InvalidMatrix("zero columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiagnosticsError::InvalidMatrix("non-finite entry".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_memories(
        memories: &[MemoryTensor],
        layout: BatchLayout,
    ) -> Result<Self, DiagnosticsError> {
        let first = memories
            .first()
            .ok_or(DiagnosticsError::DegenerateBatch(0))?;
        let (m, d) = (first.slots(), first.width());
        if memories.iter().any(|z| (z.slots(), z.width()) != (m, d)) {
            return Err(DiagnosticsError::InvalidMatrix(
                "memories differ in shape".into(),
            ));
        }
        let values: Vec<f64> = memories
            .iter()
            .flat_map(|z| z.flatten().iter().copied())
            .collect();
        match layout {
            BatchLayout::Flatten => Self::new(memories.len(), m * d, values),
            BatchLayout::Stack => Self::new(memories.len() * m, d, values),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Subtracts the column means.
    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.cols {
            let mean = (0..self.rows)
                .map(|r| self.values[r * self.cols + c])
                .sum::<f64>()
                / self.rows as f64;
            for r in 0..self.rows {
                out.values[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRankResult {
    pub erank: f64,
    /// Retained singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// `σᵢ / Σσⱼ` for the retained values.
    pub distribution: Vec<f64>,
}

/// Effective rank of `zb` (no centering).
pub fn effective_rank(zb: &BatchEmbeddingMatrix) -> Result<EffectiveRankResult, DiagnosticsError> {
    if zb.rows < 2 {
        return Err(DiagnosticsError::DegenerateBatch(zb.rows));
    }
    let m = DMatrix::from_row_slice(zb.rows, zb.cols, &zb.values);
    let mut sigma: Vec<f64> = m.singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    spectrum_effective_rank(&sigma)
}

/// Effective rank after optional column-mean centering.
pub fn effective_rank_with(
    zb: &BatchEmbeddingMatrix,
    center: bool,
) -> Result<EffectiveRankResult, DiagnosticsError> {
    if center {
        effective_rank(&zb.centered())
    } else {
        effective_rank(zb)
    }
}

/// Effective rank from a spectrum already sorted non-increasing.
pub fn spectrum_effective_rank(
    sorted_sigma: &[f64],
) -> Result<EffectiveRankResult, DiagnosticsError> {
    let sigma_max = sorted_sigma.first().copied().unwrap_or(0.0);
    if !(sigma_max >= 1e-300) {
        return Err(DiagnosticsError::ZeroMatrix);
    }
    let floor = SPECTRUM_FLOOR * sigma_max;
    let kept: Vec<f64> = sorted_sigma
        .iter()
        .copied()
        .filter(|&s| s > floor)
        .collect();
    let total: f64 = kept.iter().sum();
    let distribution: Vec<f64> = kept.iter().map(|s| s / total).collect();
    let entropy: f64 = -distribution.iter().map(|&p| p * p.ln()).sum::<f64>();
    let erank = entropy.exp().clamp(1.0, kept.len() as f64);
    Ok(EffectiveRankResult {
        erank,
        singular_values: kept,
        distribution,
    })
}

/// Shannon entropy (nats) of `softmax(logits)`, clamped to `[0, ln |V|]`.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    let h: f64 = -logp
        .iter()
        .map(|&lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 })
        .sum::<f64>();
    h.clamp(0.0, (logits.len() as f64).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyResult {
    pub per_step: Vec<f64>,
    pub mean: f64,
    pub positions: usize,
}

/// Teacher-forced conditional entropy of the decoder over the gold target `x`.
pub fn conditional_entropy<M: CompressorDecoder + ?Sized>(
    model: &M,
    z: &MemoryTensor,
    x: &TokenSequence,
) -> Result<EntropyResult, DiagnosticsError> {
    let logits = decode_logits(model, z, x)?;
    let per_step: Vec<f64> = (0..logits.rows())
        .map(|t| entropy_of_logits(logits.row(t)))
        .collect();
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(EntropyResult {
        positions: per_step.len(),
        per_step,
        mean,
    })
}

/// Effective rank and mean conditional entropy of one model on a probe set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeasurement {
    pub erank: f64,
    pub entropy: f64,
}

/// Compresses every probe prefix `x_{1:k}`, then measures the effective rank of the
/// batch and the mean entropy over the reconstruction positions.
pub fn probe_model<M: CompressorDecoder + ?Sized>(
    model: &M,
    probe: &[CompressionSample],
    layout: BatchLayout,
) -> Result<ProbeMeasurement, DiagnosticsError> {
    if probe.is_empty() {
        return Err(DiagnosticsError::EmptyProbeSet);
    }
    let mut memories = Vec::with_capacity(probe.len());
    let mut entropy_sum = 0.0;
    for s in probe {
        let prefix = s.prefix();
        let z = model.compress(&prefix)?;
        entropy_sum += conditional_entropy(model, &z, &prefix)?.mean;
        memories.push(z);
    }
    let erank = effective_rank(&BatchEmbeddingMatrix::from_memories(&memories, layout)?)?.erank;
    Ok(ProbeMeasurement {
        erank,
        entropy: entropy_sum / probe.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: u64,
    pub erank: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrajectory {
    pub points: Vec<ProbePoint>,
    /// Step of the first maximal effective rank.
    pub peak_step: Option<u64>,
    /// Whether the peak lies strictly between the first and last probe.
    pub peak_is_interior: bool,
}

impl ProbeTrajectory {
    pub fn from_points(points: Vec<ProbePoint>) -> Self {
        let mut peak: Option<usize> = None;
        for (i, p) in points.iter().enumerate() {
            if peak.map_or(true, |b| p.erank > points[b].erank) {
                peak = Some(i);
            }
        }
        let peak_is_interior = matches!(peak, Some(i) if i > 0 && i + 1 < points.len());
        Self {
            peak_step: peak.map(|i| points[i].step),
            peak_is_interior,
            points,
        }
    }

    /// `step,erank,entropy` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,erank,entropy\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.step, p.erank, p.entropy));
        }
        out
    }
}

/// Loads every checkpoint in step order and probes it on the same fixed probe set.
pub fn probe_dynamics(
    checkpoints: &[(u64, PathBuf)],
    probe: &[CompressionSample],
    layout: BatchLayout,
) -> Result<ProbeTrajectory, DiagnosticsError> {
    let mut ordered = checkpoints.to_vec();
    ordered.sort_by_key(|(step, _)| *step);
    let mut points = Vec::with_capacity(ordered.len());
    for (step, path) in &ordered {
        let ck = checkpoint::load(path).map_err(|source| DiagnosticsError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        let m = probe_model(&ck.model, probe, layout)?;
        points.push(ProbePoint {
            step: *step,
            erank: m.erank,
            entropy: m.entropy,
        });
    }
    Ok(ProbeTrajectory::from_points(points))
}
