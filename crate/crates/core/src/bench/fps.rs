//! Recognizer throughput under two accountings: inference calls only, and
//! everything including backend load and clip decoding.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Clip;
use crate::ingest::{self, IngestError};
use crate::protocol::{ProtocolError, StageClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsMode {
    InferOnly,
    InferAndLoad,
}

impl std::str::FromStr for FpsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infer_only" | "infer-only" => Ok(FpsMode::InferOnly),
            "infer_and_load" | "infer-and-load" => Ok(FpsMode::InferAndLoad),
            other => Err(format!("unknown fps mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub mode: FpsMode,
    pub frames: u64,
    pub elapsed_s: f64,
    pub fps: f64,
}

impl FpsReport {
    /// A zero-length scope reports 0 fps rather than infinity.
    pub fn new(mode: FpsMode, frames: u64, elapsed_s: f64) -> Self {
        let fps = if elapsed_s > 0.0 { frames as f64 / elapsed_s } else { 0.0 };
        Self { mode, frames, elapsed_s, fps }
    }
}

/// Both accountings of a single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsRun {
    pub clips: usize,
    pub infer_only: FpsReport,
    pub infer_and_load: FpsReport,
}

impl FpsRun {
    pub fn report(&self, mode: FpsMode) -> FpsReport {
        match mode {
            FpsMode::InferOnly => self.infer_only,
            FpsMode::InferAndLoad => self.infer_and_load,
        }
    }
}

/// Where a benchmark clip comes from. Decoding counts as load time.
#[derive(Debug, Clone)]
pub enum ClipInput {
    Decoded(Clip),
    Container(PathBuf),
    Bytes { source_id: String, bytes: Vec<u8> },
}

impl ClipInput {
    fn load(self) -> Result<Clip, IngestError> {
        match self {
            ClipInput::Decoded(c) => Ok(c),
            ClipInput::Container(p) => ingest::load_clip_container(p),
            ClipInput::Bytes { source_id, bytes } => ingest::decode_mclip(&bytes, &source_id),
        }
    }
}

#[derive(Debug, Error)]
pub enum FpsError {
    #[error("no clips to measure")]
    NoClips,
    #[error("loading clip {index}: {source}")]
    Load { index: usize, source: IngestError },
    #[error(transparent)]
    Backend(#[from] ProtocolError),
}

/// Handshakes the recognizer, then loads and recognizes each clip with one
/// call in flight. The infer-only scope sums the per-call wall times; the
/// infer-and-load scope is the whole run. Any failure discards the run.
pub async fn measure_fps(
    clips: Vec<ClipInput>,
    recognizer: &StageClient,
    deadline: Duration,
) -> Result<FpsRun, FpsError> {
    if clips.is_empty() {
        return Err(FpsError::NoClips);
    }
    let started = Instant::now();
    let caps = recognizer.handshake(deadline).await?;
    let n_clips = clips.len();
    let mut frames = 0u64;
    let mut infer = Duration::ZERO;
    for (index, input) in clips.into_iter().enumerate() {
        let mut clip = input.load().map_err(|source| FpsError::Load { index, source })?;
        if let Some(d) = caps.input_resolution {
            clip = ingest::resize_for_model(&clip, d.width, d.height).map_err(|source| FpsError::Load { index, source })?;
        }
        frames += clip.len() as u64;
        let t = recognizer.recognize(clip, None, deadline).await?;
        infer += t.elapsed;
    }
    let total = started.elapsed();
    Ok(FpsRun {
        clips: n_clips,
        infer_only: FpsReport::new(FpsMode::InferOnly, frames, infer.as_secs_f64()),
        infer_and_load: FpsReport::new(FpsMode::InferAndLoad, frames, total.as_secs_f64()),
    })
}
