//! `FLAB1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FLAB1" | u32 header_len | header JSON (header_len bytes) | f32 payload | u32 crc32
//! ```
//!
//! The header carries the configs, vocabulary, step counter and the ordered tensor
//! table (`name`, `rows`, `cols`); the payload holds each tensor row-major in table
//! order. The trailing CRC-32 covers every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scripted::{ScriptedModel, StepDistribution};
use super::{
    CompressionConfig, CompressionModel, CompressorDecoder, LogitMatrix, MemoryTensor, ModelConfig,
    ModelError,
};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub const MAGIC: &[u8; 5] = b"FLAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a FLAB1 checkpoint")]
    BadMagic,
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Transformer {
        compressor: ModelConfig,
        decoder: ModelConfig,
        compression: CompressionConfig,
        tensors: Vec<TensorEntry>,
    },
    Scripted {
        behavior: StepDistribution,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub vocabulary: Vocabulary,
    pub model: ModelSpec,
}

/// A model restored from disk.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Transformer(CompressionModel<f32>),
    Scripted(ScriptedModel),
}

impl LoadedModel {
    pub fn as_transformer(&self) -> Option<&CompressionModel<f32>> {
        match self {
            Self::Transformer(m) => Some(m),
            Self::Scripted(_) => None,
        }
    }
}

impl CompressorDecoder for LoadedModel {
    fn vocabulary(&self) -> &Vocabulary {
        match self {
            Self::Transformer(m) => m.vocabulary(),
            Self::Scripted(m) => m.vocabulary(),
        }
    }

    fn compress(&self, x: &TokenSequence) -> Result<MemoryTensor, ModelError> {
        match self {
            Self::Transformer(m) => m.compress(x),
            Self::Scripted(m) => m.compress(x),
        }
    }

    fn next_token_logits(
        &self,
        z: &MemoryTensor,
        input: &[TokenId],
    ) -> Result<LogitMatrix, ModelError> {
        match self {
            Self::Transformer(m) => m.next_token_logits(z, input),
            Self::Scripted(m) => m.next_token_logits(z, input),
        }
    }

    fn max_input_len(&self, slots: usize) -> usize {
        match self {
            Self::Transformer(m) => m.max_input_len(slots),
            Self::Scripted(m) => m.max_input_len(slots),
        }
    }
}

/// A loaded checkpoint with its step counter.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub model: LoadedModel,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn frame(header: &CheckpointHeader, payload: &[f32]) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + payload.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Serializes a trained model and its step counter.
pub fn encode_model(model: &CompressionModel<f32>, step: u64) -> Vec<u8> {
    let named = model.params.named_tensors();
    let tensors = named
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    let payload: Vec<f32> = named
        .iter()
        .flat_map(|(_, t)| t.as_slice().iter().copied())
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        step,
        vocabulary: model.vocab.clone(),
        model: ModelSpec::Transformer {
            compressor: model.compressor_cfg.clone(),
            decoder: model.decoder_cfg.clone(),
            compression: model.compression.clone(),
            tensors,
        },
    };
    frame(&header, &payload)
}

pub fn encode_scripted(model: &ScriptedModel, step: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        step,
        vocabulary: model.vocab().clone(),
        model: ModelSpec::Scripted {
            behavior: model.behavior().clone(),
        },
    };
    frame(&header, &[])
}

pub fn save_model(
    path: &Path,
    model: &CompressionModel<f32>,
    step: u64,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_model(model, step)).map_err(io_err(path))
}

pub fn save_scripted(path: &Path, model: &ScriptedModel, step: u64) -> Result<(), CheckpointError> {
    fs::write(path, encode_scripted(model, step)).map_err(io_err(path))
}

/// Parses and verifies a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Malformed("truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let hlen_at = MAGIC.len();
    let header_len =
        u32::from_le_bytes(body[hlen_at..hlen_at + 4].try_into().expect("4 bytes")) as usize;
    let header_end = hlen_at + 4 + header_len;
    if header_end > body.len() {
        return Err(CheckpointError::Malformed(
            "header length exceeds file".into(),
        ));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[hlen_at + 4..header_end])
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &body[header_end..];
    let model = match header.model {
        ModelSpec::Scripted { behavior } => {
            if !payload.is_empty() {
                return Err(CheckpointError::Malformed(
                    "scripted checkpoint carries tensor data".into(),
                ));
            }
            LoadedModel::Scripted(ScriptedModel::new(header.vocabulary, behavior))
        }
        ModelSpec::Transformer {
            compressor,
            decoder,
            compression,
            tensors,
        } => {
            let expected: usize = tensors.iter().map(|t| t.rows * t.cols).sum();
            if payload.len() != expected * 4 {
                return Err(CheckpointError::Malformed(format!(
                    "payload holds {} bytes, tensor table needs {}",
                    payload.len(),
                    expected * 4
                )));
            }
            let mut model = CompressionModel::<f32>::new(
                header.vocabulary,
                compressor,
                decoder,
                compression,
                0,
            )?;
            let names: Vec<String> = model
                .params
                .named_tensors()
                .into_iter()
                .map(|(n, _)| n)
                .collect();
            if names.len() != tensors.len() {
                return Err(CheckpointError::Malformed(
                    "tensor count does not match configuration".into(),
                ));
            }
            let mut offset = 0;
            for ((slot, name), entry) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(&names)
                .zip(&tensors)
            {
                if *name != entry.name || slot.shape() != (entry.rows, entry.cols) {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        entry.name,
                        (entry.rows, entry.cols),
                        name,
                        slot.shape()
                    )));
                }
                let n = entry.rows * entry.cols;
                let values = payload[offset..offset + n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                *slot = Matrix::from_vec(entry.rows, entry.cols, values);
                offset += n * 4;
            }
            if !model.params.is_finite() {
                return Err(CheckpointError::Malformed(
                    "non-finite parameter values".into(),
                ));
            }
            LoadedModel::Transformer(model)
        }
    };
    Ok(Checkpoint {
        step: header.step,
        model,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// Checkpoint file name for a training step.
pub fn file_name(step: u64) -> String {
    format!("ckpt_{step:08}")
}

/// All `ckpt_*` files in `dir`, ordered by step.
pub fn list(dir: &Path) -> Result<Vec<(u64, PathBuf)>, CheckpointError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push((step, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;

    fn model() -> CompressionModel<f32> {
        let vocab = Vocabulary::synthetic(16);
        let c = ModelConfig::new(Role::Compressor, 16, 1, 2, 8, 16, 16);
        let d = ModelConfig::new(Role::Decoder, 16, 1, 2, 8, 16, 16);
        CompressionModel::new(
            vocab,
            c,
            d,
            CompressionConfig {
                memory_slots: 2,
                source_length: 8,
                projector: true,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = encode_model(&m, 42);
        assert_eq!(&bytes[..5], MAGIC);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.step, 42);
        let back = ck.model.as_transformer().unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.vocab, m.vocab);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_model(&model(), 1);
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            decode(b"NOPE!...."),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn scripted_round_trip() {
        let s = ScriptedModel::new(Vocabulary::synthetic(10), StepDistribution::Verbatim);
        let ck = decode(&encode_scripted(&s, 0)).unwrap();
        match ck.model {
            LoadedModel::Scripted(m) => assert_eq!(m.behavior(), &StepDistribution::Verbatim),
            LoadedModel::Transformer(_) => panic!("expected scripted model"),
        }
    }

    #[test]
    fn file_names_are_zero_padded() {
        assert_eq!(file_name(50), "ckpt_00000050");
    }
}
