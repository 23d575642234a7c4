//! Training and diagnostics toolkit for memory-token context compressors.
//!
//! A compressor maps `L` source tokens to `M` memory vectors; a decoder reconstructs
//! the source from them. The crate covers the model pair and its training objective,
//! reconstruction and QA-based fidelity evaluation, and the effective-rank and
//! conditional-entropy probes together with their correlation analysis.

pub mod analysis;
pub mod diagnostics;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod vocab;
