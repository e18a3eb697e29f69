//! Category-wise contrastive decoding for structured report generation.
//!
//! The crate provides the full inference stack at desk scale: token
//! vocabularies and log-probability arithmetic, plausibility-based
//! vocabulary subselection, single- and dual-stream greedy decode loops,
//! pluggable conditional language models (an exact tabular model and a
//! tiny attention-exposing transformer with low-rank adapters), grayscale
//! image masking with PGM I/O, the eight-header structured report format,
//! layer-averaged max attention diagnostics, n-gram and label metrics,
//! and a synthetic co-occurrence benchmark.

pub mod attention;
pub mod bench;
pub mod decode;
pub mod image;
pub mod logprob;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod report;
pub mod rng;
pub mod vocab;

pub use decode::{DecodeConfig, DecodeMode, VpMode};
pub use model::ConditionalLm;
pub use report::{Category, StructuredReport};
pub use vocab::{TokenId, Vocabulary};
