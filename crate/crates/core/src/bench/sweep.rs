//! Quality/latency sweeps over sampling steps, and latency over resolution
//! and batch size.

use std::time::Duration;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stats::{self, GaussianStats};
use crate::domain::{DomainError, Embedding, Resolution, SynthesisRequest};
use crate::protocol::{Backends, ProtocolError, Stage};

pub const DEFAULT_SWEEP_PROMPT: &str = "A beautiful flower garden on a sunny day with a valley background";
pub const DEFAULT_SWEEP_STEPS: [u32; 8] = [50, 45, 40, 35, 30, 25, 20, 15];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty sweep")]
    Empty,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Backend(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub steps: Vec<u32>,
    pub resolution: Resolution,
    pub k: u32,
    pub prompt: String,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SWEEP_STEPS.to_vec(),
            resolution: Resolution::W512H512,
            k: 8,
            prompt: DEFAULT_SWEEP_PROMPT.to_string(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: u32,
    pub fid: Option<f64>,
    pub seconds_per_batch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(steps: u32, fid: f64, seconds_per_batch: f64) -> Self {
        Self { steps, fid: Some(fid), seconds_per_batch: Some(seconds_per_batch), error: None }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Rows in descending steps order; the largest step count is the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub width: u32,
    pub height: u32,
    pub k: u32,
    pub prompt: String,
    pub seed: Option<u64>,
    pub reference_steps: u32,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, steps: u32) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.steps == steps)
    }
}

async fn batch_features(backends: &Backends, images: Vec<crate::domain::GeneratedImage>, deadline: Duration) -> Result<Vec<Embedding>, ProtocolError> {
    try_join_all(images.into_iter().map(|img| async move { backends.image_features.image_features(img, deadline).await.map(|t| t.value) })).await
}

/// For each steps value (largest first): synthesize one batch, time the call,
/// extract features and compare against the reference batch. A failed row
/// is recorded and the sweep moves on.
pub async fn run_sweep(spec: &SweepSpec, backends: &Backends, deadline: Duration) -> Result<SweepReport, SweepError> {
    let mut steps = spec.steps.clone();
    steps.sort_unstable_by(|a, b| b.cmp(a));
    steps.dedup();
    let reference_steps = *steps.first().ok_or(SweepError::Empty)?;
    // reject bad parameters before touching any backend
    SynthesisRequest::new("sweep", spec.prompt.clone(), reference_steps, spec.resolution, spec.k, spec.seed)?;
    backends.handshake(&[Stage::Synthesize, Stage::ImageFeatures], deadline).await?;

    let mut reference: Option<GaussianStats<f64>> = None;
    let mut rows = Vec::with_capacity(steps.len());
    for &s in &steps {
        let row = async {
            let req = SynthesisRequest::new(format!("sweep-{s}"), spec.prompt.clone(), s, spec.resolution, spec.k, spec.seed)
                .map_err(|e| (None, e.to_string()))?;
            let batch = backends.synthesize.synthesize(req, deadline).await.map_err(|e| (None, e.to_string()))?;
            let seconds = batch.elapsed.as_secs_f64();
            let features = batch_features(backends, batch.value, deadline).await.map_err(|e| (Some(seconds), e.to_string()))?;
            let vectors: Vec<&[f64]> = features.iter().map(|f| f.as_slice()).collect();
            let stats = stats::gaussian_stats(&vectors).map_err(|e| (Some(seconds), e.to_string()))?;
            let fid = if s == reference_steps {
                reference = Some(stats);
                0.0
            } else {
                let r = reference.as_ref().ok_or((Some(seconds), "reference batch failed".to_string()))?;
                stats::fid(r, &stats).map_err(|e| (Some(seconds), e.to_string()))?
            };
            Ok::<_, (Option<f64>, String)>(SweepRow::ok(s, fid, seconds))
        }
        .await;
        rows.push(row.unwrap_or_else(|(seconds, error)| SweepRow {
            steps: s,
            fid: None,
            seconds_per_batch: seconds,
            error: Some(error),
        }));
    }
    let (width, height) = spec.resolution.dims();
    Ok(SweepReport {
        width,
        height,
        k: spec.k,
        prompt: spec.prompt.clone(),
        seed: Some(spec.seed),
        reference_steps,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub width: u32,
    pub height: u32,
    pub k: u32,
    pub seconds_per_batch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSweepReport {
    pub steps: u32,
    pub prompt: String,
    pub seed: u64,
    pub rows: Vec<BatchRow>,
}

/// Synthesis latency for every (resolution, K) pair at fixed steps.
pub async fn run_batch_sweep(
    resolutions: &[Resolution],
    ks: &[u32],
    steps: u32,
    prompt: &str,
    seed: u64,
    backends: &Backends,
    deadline: Duration,
) -> Result<BatchSweepReport, SweepError> {
    if resolutions.is_empty() || ks.is_empty() {
        return Err(SweepError::Empty);
    }
    backends.handshake(&[Stage::Synthesize], deadline).await?;
    let mut rows = Vec::new();
    for &res in resolutions {
        for &k in ks {
            let (width, height) = res.dims();
            let outcome = match SynthesisRequest::new(format!("batch-{res}-{k}"), prompt, steps, res, k, seed) {
                Ok(req) => backends.synthesize.synthesize(req, deadline).await.map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            rows.push(match outcome {
                Ok(t) => BatchRow { width, height, k, seconds_per_batch: Some(t.elapsed.as_secs_f64()), error: None },
                Err(error) => BatchRow { width, height, k, seconds_per_batch: None, error: Some(error) },
            });
        }
    }
    Ok(BatchSweepReport { steps, prompt: prompt.to_string(), seed, rows })
}
