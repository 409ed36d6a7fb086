//! Keyword-to-picture engine: turns recognized sign glosses into K
//! synthesized candidate images, captions them, and keeps the pair whose
//! caption embedding is closest (by cosine) to the keyword query.
//!
//! Every model stage sits behind a small HTTP+JSON protocol
//! ([`protocol`]); [`stubs`] provides deterministic in-process backends so
//! the whole pipeline and the benchmarks run without any model weights.

pub mod bench;
pub mod codec;
pub mod config;
pub mod domain;
pub mod ingest;
pub mod pipeline;
pub mod protocol;
pub mod scalar;
pub mod selection;
pub mod stubs;

pub use crate::config::{validate, ConfigError, PipelineConfig, StageEndpoints, ValidatedConfig};
pub use crate::domain::{
    CandidatePair, Caption, Clip, ConversationTurn, DomainError, Embedding, Frame, GeneratedImage, GlossPrediction,
    KeywordSequence, Resolution, SelectionResult, StageTimings, SynthesisRequest, TimedStage,
};
pub use crate::pipeline::{Conversation, Engine, PipelineEvent, StreamInput, TurnError};
pub use crate::protocol::{Backends, ProtocolError, Stage, StageClient, PROTOCOL_VERSION};
pub use crate::scalar::Real;

pub type GaussianStats64 = bench::GaussianStats<f64>;
pub type GaussianStats32 = bench::GaussianStats<f32>;
pub type Argmax64 = selection::Argmax<f64>;
pub type Argmax32 = selection::Argmax<f32>;
