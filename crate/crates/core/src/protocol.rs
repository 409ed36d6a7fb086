//! Backend wire protocol, version 1.
//!
//! Every model stage sits behind its own HTTP endpoint:
//!
//! | route                  | body                      | reply                      |
//! |------------------------|---------------------------|----------------------------|
//! | `GET /v1/capabilities` | –                         | [`BackendCapabilities`]    |
//! | `POST /v1/recognize`   | [`RecognizeRequest`]      | [`RecognizeResponse`]      |
//! | `POST /v1/synthesize`  | [`SynthesisRequest`]      | [`SynthesizeResponse`]     |
//! | `POST /v1/caption`     | [`CaptionRequest`]        | [`CaptionResponse`]        |
//! | `POST /v1/embed`       | [`EmbedRequest`]          | [`EmbedResponse`]          |
//! | `POST /v1/image_features` | [`ImageFeaturesRequest`] | [`ImageFeaturesResponse`] |
//!
//! Bodies are canonical JSON (`application/json`, compact, fields in
//! declaration order, binary as padded base64). Failures carry
//! [`ErrorBody`] with a 4xx/5xx status.
//!
//! [`StageClient`] does the handshake, enforces deadlines, times every call on
//! the monotonic clock and rejects any reply that violates a domain invariant.

use std::fmt;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Caption, Clip, DomainError, Embedding, GeneratedImage, GlossPrediction, Resolution, SynthesisRequest,
};

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on ranked predictions per recognize reply.
pub const MAX_TOP_K: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recognize,
    Synthesize,
    Caption,
    Embed,
    ImageFeatures,
}

impl Stage {
    /// Protocol order; also the port order of `stubs up`.
    pub const ALL: [Stage; 5] = [Stage::Recognize, Stage::Synthesize, Stage::Caption, Stage::Embed, Stage::ImageFeatures];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Recognize => "recognize",
            Stage::Synthesize => "synthesize",
            Stage::Caption => "caption",
            Stage::Embed => "embed",
            Stage::ImageFeatures => "image_features",
        }
    }

    pub fn route(self) -> &'static str {
        match self {
            Stage::Recognize => "/v1/recognize",
            Stage::Synthesize => "/v1/synthesize",
            Stage::Caption => "/v1/caption",
            Stage::Embed => "/v1/embed",
            Stage::ImageFeatures => "/v1/image_features",
        }
    }

    pub fn from_route(path: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.route() == path)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl From<Resolution> for Dims {
    fn from(r: Resolution) -> Self {
        let (width, height) = r.dims();
        Dims { width, height }
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CapabilitiesWire")]
pub struct BackendCapabilities {
    pub stage: Stage,
    pub name: String,
    pub version: String,
    pub protocol_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_resolution: Option<Dims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supported_resolutions: Option<Vec<Dims>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_concurrency: Option<u32>,
}

#[derive(Deserialize)]
struct CapabilitiesWire {
    stage: Stage,
    name: String,
    version: String,
    protocol_version: u32,
    #[serde(default)]
    embedding_dim: Option<usize>,
    #[serde(default)]
    input_resolution: Option<Dims>,
    #[serde(default)]
    vocabulary_size: Option<usize>,
    #[serde(default)]
    supported_resolutions: Option<Vec<Dims>>,
    #[serde(default)]
    max_concurrency: Option<u32>,
}

impl TryFrom<CapabilitiesWire> for BackendCapabilities {
    type Error = String;

    fn try_from(w: CapabilitiesWire) -> Result<Self, String> {
        let caps = BackendCapabilities {
            stage: w.stage,
            name: w.name,
            version: w.version,
            protocol_version: w.protocol_version,
            embedding_dim: w.embedding_dim,
            input_resolution: w.input_resolution,
            vocabulary_size: w.vocabulary_size,
            supported_resolutions: w.supported_resolutions,
            max_concurrency: w.max_concurrency,
        };
        caps.check()?;
        Ok(caps)
    }
}

impl BackendCapabilities {
    pub fn new(stage: Stage, name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            stage,
            name: name.into(),
            version: version.into(),
            protocol_version: PROTOCOL_VERSION,
            embedding_dim: None,
            input_resolution: None,
            vocabulary_size: None,
            supported_resolutions: None,
            max_concurrency: None,
        }
    }

    /// Stage-specific invariants.
    pub fn check(&self) -> Result<(), String> {
        match self.stage {
            Stage::Embed | Stage::ImageFeatures => match self.embedding_dim {
                Some(d) if d >= 1 => {}
                _ => return Err(format!("{} stage must declare embedding_dim >= 1", self.stage)),
            },
            Stage::Recognize => {
                let r = self.input_resolution.ok_or("recognize stage must declare input_resolution")?;
                if r.width < crate::domain::MIN_FRAME_SIDE || r.height < crate::domain::MIN_FRAME_SIDE {
                    return Err(format!("input_resolution {}x{} too small", r.width, r.height));
                }
                if self.vocabulary_size.unwrap_or(0) == 0 {
                    return Err("recognize stage must declare vocabulary_size >= 1".into());
                }
            }
            Stage::Synthesize => {
                let res = self.supported_resolutions.as_deref().unwrap_or(&[]);
                if res.is_empty() {
                    return Err("synthesize stage must declare supported_resolutions".into());
                }
                if let Some(d) = res.iter().find(|d| Resolution::from_dims(d.width, d.height).is_err()) {
                    return Err(format!("unsupported resolution {}x{}", d.width, d.height));
                }
            }
            Stage::Caption => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizeRequest {
    pub clip: Clip,
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    /// Test affordance honored only by the stub recognizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debug_label_hint: Option<String>,
}

fn default_top_k() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecognizeResponseWire")]
pub struct RecognizeResponse {
    pub clip_id: String,
    pub predictions: Vec<GlossPrediction>,
}

#[derive(Deserialize)]
struct RecognizeResponseWire {
    clip_id: String,
    predictions: Vec<GlossPrediction>,
}

impl TryFrom<RecognizeResponseWire> for RecognizeResponse {
    type Error = String;

    fn try_from(w: RecognizeResponseWire) -> Result<Self, String> {
        if w.predictions.is_empty() || w.predictions.len() > MAX_TOP_K as usize {
            return Err(format!("{} predictions, expected 1..={MAX_TOP_K}", w.predictions.len()));
        }
        if w.predictions.windows(2).any(|p| p[0].confidence() < p[1].confidence()) {
            return Err("predictions not sorted by confidence".into());
        }
        Ok(RecognizeResponse { clip_id: w.clip_id, predictions: w.predictions })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeResponse {
    pub request_id: String,
    pub images: Vec<GeneratedImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image: GeneratedImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeaturesRequest {
    pub image: GeneratedImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeaturesResponse {
    pub image_id: String,
    pub features: Embedding,
}

/// Error payload for every non-2xx reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageRequest {
    Recognize(RecognizeRequest),
    Synthesize(SynthesisRequest),
    Caption(CaptionRequest),
    Embed(EmbedRequest),
    ImageFeatures(ImageFeaturesRequest),
}

impl StageRequest {
    pub fn stage(&self) -> Stage {
        match self {
            StageRequest::Recognize(_) => Stage::Recognize,
            StageRequest::Synthesize(_) => Stage::Synthesize,
            StageRequest::Caption(_) => Stage::Caption,
            StageRequest::Embed(_) => Stage::Embed,
            StageRequest::ImageFeatures(_) => Stage::ImageFeatures,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            StageRequest::Recognize(r) => encode(r),
            StageRequest::Synthesize(r) => encode(r),
            StageRequest::Caption(r) => encode(r),
            StageRequest::Embed(r) => encode(r),
            StageRequest::ImageFeatures(r) => encode(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageResponse {
    Recognize(RecognizeResponse),
    Synthesize(SynthesizeResponse),
    Caption(CaptionResponse),
    Embed(EmbedResponse),
    ImageFeatures(ImageFeaturesResponse),
}

impl StageResponse {
    pub fn decode(stage: Stage, bytes: &[u8]) -> Result<Self, DecodeError> {
        Ok(match stage {
            Stage::Recognize => StageResponse::Recognize(decode(bytes)?),
            Stage::Synthesize => StageResponse::Synthesize(decode(bytes)?),
            Stage::Caption => StageResponse::Caption(decode(bytes)?),
            Stage::Embed => StageResponse::Embed(decode(bytes)?),
            Stage::ImageFeatures => StageResponse::ImageFeatures(decode(bytes)?),
        })
    }

    pub fn stage(&self) -> Stage {
        match self {
            StageResponse::Recognize(_) => Stage::Recognize,
            StageResponse::Synthesize(_) => Stage::Synthesize,
            StageResponse::Caption(_) => Stage::Caption,
            StageResponse::Embed(_) => Stage::Embed,
            StageResponse::ImageFeatures(_) => Stage::ImageFeatures,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            StageResponse::Recognize(r) => encode(r),
            StageResponse::Synthesize(r) => encode(r),
            StageResponse::Caption(r) => encode(r),
            StageResponse::Embed(r) => encode(r),
            StageResponse::ImageFeatures(r) => encode(r),
        }
    }
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Decode failure located by JSON path (`$` is the document root).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("decode error at {path}: {message}")]
pub struct DecodeError {
    pub path: String,
    pub message: String,
}

/// Canonical JSON: compact, fields in declaration order.
pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("domain types always serialize")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        // "?" marks a position the parser never reached (e.g. truncated input)
        let path = match path.trim_end_matches(".?").trim_end_matches('?') {
            "" | "." => "$".to_string(),
            p => format!("$.{p}"),
        };
        DecodeError { path, message: e.into_inner().to_string() }
    })?;
    Ok(value)
}

// ---------------------------------------------------------------------------
// Transport and client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireReply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl WireReply {
    pub fn ok(body: Vec<u8>) -> Self {
        Self { status: 200, body }
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: encode(&ErrorBody::new(code, message)) }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Byte-level request/reply channel to one backend endpoint.
#[async_trait]
pub trait Transport: Send + Sync {
    /// Human-readable endpoint description for error messages.
    fn endpoint(&self) -> String;
    async fn get(&self, path: &str) -> Result<WireReply, TransportError>;
    async fn post(&self, path: &str, body: Vec<u8>) -> Result<WireReply, TransportError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{endpoint} unreachable after {elapsed_ms} ms: {message}")]
    Unreachable { endpoint: String, elapsed_ms: u64, message: String },
    #[error("endpoint serves {actual}, expected {expected}")]
    StageMismatch { expected: Stage, actual: Stage },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid capabilities: {0}")]
    InvalidCapabilities(String),
    #[error("{stage} client used before handshake")]
    NotHandshaken { stage: Stage },
    #[error("{stage} call exceeded {deadline_ms} ms deadline")]
    DeadlineExceeded { stage: Stage, deadline_ms: u64 },
    #[error("malformed {stage} response: {message}")]
    MalformedResponse { stage: Stage, message: String },
    #[error("{stage} backend error {status} {code}: {message}")]
    BackendError { stage: Stage, status: u16, code: String, message: String },
    #[error("request rejected locally: {0}")]
    InvalidRequest(String),
}

/// A value together with the wall time it took to obtain.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub elapsed: Duration,
}

/// Checks a reply against its request and the backend's capabilities.
pub fn validate_response(
    request: &StageRequest,
    response: &StageResponse,
    caps: &BackendCapabilities,
) -> Result<(), String> {
    match (request, response) {
        (StageRequest::Recognize(req), StageResponse::Recognize(resp)) => {
            if resp.clip_id != req.clip.clip_id() {
                return Err(format!("clip_id {} does not echo {}", resp.clip_id, req.clip.clip_id()));
            }
            if resp.predictions.len() > req.top_k.clamp(1, MAX_TOP_K) as usize {
                return Err(format!("{} predictions for top_k={}", resp.predictions.len(), req.top_k));
            }
        }
        (StageRequest::Synthesize(req), StageResponse::Synthesize(resp)) => {
            if resp.request_id != req.request_id() {
                return Err(format!("request_id {} does not echo {}", resp.request_id, req.request_id()));
            }
            if resp.images.len() != req.k() as usize {
                return Err(format!("{} images for k={}", resp.images.len(), req.k()));
            }
            for (i, img) in resp.images.iter().enumerate() {
                if img.ordinal() as usize != i {
                    return Err(format!("image {i} has ordinal {}", img.ordinal()));
                }
                if img.request_ref() != req.request_id() {
                    return Err(format!("image {i} refers to request {}", img.request_ref()));
                }
                let dims = img.dimensions();
                if dims != (req.width(), req.height()) {
                    return Err(format!("image {i} is {}x{}, requested {}x{}", dims.0, dims.1, req.width(), req.height()));
                }
            }
            let mut ids: Vec<&str> = resp.images.iter().map(|i| i.image_id()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != resp.images.len() {
                return Err("duplicate image ids".into());
            }
        }
        (StageRequest::Caption(req), StageResponse::Caption(resp)) => {
            if resp.caption.image_ref() != req.image.image_id() {
                return Err(format!("caption refers to {}, expected {}", resp.caption.image_ref(), req.image.image_id()));
            }
        }
        (StageRequest::Embed(req), StageResponse::Embed(resp)) => {
            check_dim(&resp.embedding, caps)?;
            if !req.text.trim().is_empty() && resp.embedding.is_zero() {
                return Err("zero embedding for non-empty text".into());
            }
        }
        (StageRequest::ImageFeatures(req), StageResponse::ImageFeatures(resp)) => {
            if resp.image_id != req.image.image_id() {
                return Err(format!("image_id {} does not echo {}", resp.image_id, req.image.image_id()));
            }
            check_dim(&resp.features, caps)?;
        }
        (req, resp) => return Err(format!("{} reply to a {} request", resp.stage(), req.stage())),
    }
    Ok(())
}

fn check_dim(e: &Embedding, caps: &BackendCapabilities) -> Result<(), String> {
    match caps.embedding_dim {
        Some(d) if d != e.dim() => Err(format!("dim {} but handshake declared {d}", e.dim())),
        _ => Ok(()),
    }
}

/// Validating, timing client for one stage.
pub struct StageClient {
    stage: Stage,
    transport: Arc<dyn Transport>,
    caps: RwLock<Option<Arc<BackendCapabilities>>>,
}

impl fmt::Debug for StageClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageClient")
            .field("stage", &self.stage)
            .field("endpoint", &self.transport.endpoint())
            .finish()
    }
}

impl StageClient {
    pub fn new(stage: Stage, transport: Arc<dyn Transport>) -> Self {
        Self { stage, transport, caps: RwLock::new(None) }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn endpoint(&self) -> String {
        self.transport.endpoint()
    }

    /// Cached capabilities from the last successful handshake.
    pub fn capabilities(&self) -> Option<Arc<BackendCapabilities>> {
        self.caps.read().expect("caps lock").clone()
    }

    /// `GET /v1/capabilities`, checked against the expected stage.
    pub async fn handshake(&self, deadline: Duration) -> Result<Arc<BackendCapabilities>, ProtocolError> {
        let started = Instant::now();
        let unreachable = |message: String| ProtocolError::Unreachable {
            endpoint: self.transport.endpoint(),
            elapsed_ms: started.elapsed().as_millis() as u64,
            message,
        };
        let reply = match tokio::time::timeout(deadline, self.transport.get("/v1/capabilities")).await {
            Err(_) => return Err(unreachable(format!("no reply within {} ms", deadline.as_millis()))),
            Ok(Err(e)) => return Err(unreachable(e.0)),
            Ok(Ok(r)) => r,
        };
        if reply.status != 200 {
            return Err(self.backend_error(&reply));
        }
        // version is checked before full validation so older/newer peers get a precise error
        if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&reply.body) {
            if let Some(p) = v.get("protocol_version").and_then(|p| p.as_u64()) {
                if p != u64::from(PROTOCOL_VERSION) {
                    return Err(ProtocolError::UnsupportedVersion(p as u32));
                }
            }
        }
        let caps: BackendCapabilities =
            decode(&reply.body).map_err(|e| ProtocolError::InvalidCapabilities(e.to_string()))?;
        if caps.stage != self.stage {
            return Err(ProtocolError::StageMismatch { expected: self.stage, actual: caps.stage });
        }
        let caps = Arc::new(caps);
        *self.caps.write().expect("caps lock") = Some(caps.clone());
        Ok(caps)
    }

    fn backend_error(&self, reply: &WireReply) -> ProtocolError {
        let (code, message) = match serde_json::from_slice::<ErrorBody>(&reply.body) {
            Ok(b) => (b.code, b.message),
            Err(_) => ("unknown".to_string(), String::from_utf8_lossy(&reply.body).into_owned()),
        };
        ProtocolError::BackendError { stage: self.stage, status: reply.status, code, message }
    }

    /// `POST /v1/<stage>` with deadline, decode and validation.
    pub async fn call_stage(&self, request: StageRequest, deadline: Duration) -> Result<Timed<StageResponse>, ProtocolError> {
        if request.stage() != self.stage {
            return Err(ProtocolError::StageMismatch { expected: self.stage, actual: request.stage() });
        }
        let caps = self.capabilities().ok_or(ProtocolError::NotHandshaken { stage: self.stage })?;
        if let StageRequest::Synthesize(req) = &request {
            let supported = caps.supported_resolutions.as_deref().unwrap_or(&[]);
            let want = Dims { width: req.width(), height: req.height() };
            if !supported.contains(&want) {
                return Err(ProtocolError::InvalidRequest(format!(
                    "backend does not support {}x{}",
                    want.width, want.height
                )));
            }
        }
        let body = request.encode();
        let started = Instant::now();
        let reply = match tokio::time::timeout(deadline, self.transport.post(self.stage.route(), body)).await {
            Err(_) => {
                return Err(ProtocolError::DeadlineExceeded { stage: self.stage, deadline_ms: deadline.as_millis() as u64 })
            }
            Ok(Err(e)) => {
                return Err(ProtocolError::Unreachable {
                    endpoint: self.transport.endpoint(),
                    elapsed_ms: started.elapsed().as_millis() as u64,
                    message: e.0,
                })
            }
            Ok(Ok(r)) => r,
        };
        let elapsed = started.elapsed();
        if reply.status >= 400 {
            return Err(self.backend_error(&reply));
        }
        let malformed = |message: String| ProtocolError::MalformedResponse { stage: self.stage, message };
        let response = StageResponse::decode(self.stage, &reply.body).map_err(|e| malformed(e.to_string()))?;
        validate_response(&request, &response, &caps).map_err(malformed)?;
        Ok(Timed { value: response, elapsed })
    }

    pub async fn recognize(
        &self,
        clip: Clip,
        hint: Option<String>,
        deadline: Duration,
    ) -> Result<Timed<Vec<GlossPrediction>>, ProtocolError> {
        let req = StageRequest::Recognize(RecognizeRequest { clip, top_k: default_top_k(), debug_label_hint: hint });
        let t = self.call_stage(req, deadline).await?;
        match t.value {
            StageResponse::Recognize(r) => Ok(Timed { value: r.predictions, elapsed: t.elapsed }),
            _ => unreachable!("validated stage"),
        }
    }

    pub async fn synthesize(
        &self,
        request: SynthesisRequest,
        deadline: Duration,
    ) -> Result<Timed<Vec<GeneratedImage>>, ProtocolError> {
        let t = self.call_stage(StageRequest::Synthesize(request), deadline).await?;
        match t.value {
            StageResponse::Synthesize(r) => Ok(Timed { value: r.images, elapsed: t.elapsed }),
            _ => unreachable!("validated stage"),
        }
    }

    pub async fn caption(&self, image: GeneratedImage, deadline: Duration) -> Result<Timed<Caption>, ProtocolError> {
        let t = self.call_stage(StageRequest::Caption(CaptionRequest { image }), deadline).await?;
        match t.value {
            StageResponse::Caption(r) => Ok(Timed { value: r.caption, elapsed: t.elapsed }),
            _ => unreachable!("validated stage"),
        }
    }

    pub async fn embed(&self, text: impl Into<String>, deadline: Duration) -> Result<Timed<Embedding>, ProtocolError> {
        let t = self.call_stage(StageRequest::Embed(EmbedRequest { text: text.into() }), deadline).await?;
        match t.value {
            StageResponse::Embed(r) => Ok(Timed { value: r.embedding, elapsed: t.elapsed }),
            _ => unreachable!("validated stage"),
        }
    }

    pub async fn image_features(&self, image: GeneratedImage, deadline: Duration) -> Result<Timed<Embedding>, ProtocolError> {
        let t = self.call_stage(StageRequest::ImageFeatures(ImageFeaturesRequest { image }), deadline).await?;
        match t.value {
            StageResponse::ImageFeatures(r) => Ok(Timed { value: r.features, elapsed: t.elapsed }),
            _ => unreachable!("validated stage"),
        }
    }
}

/// One client per stage.
#[derive(Debug, Clone)]
pub struct Backends {
    pub recognize: Arc<StageClient>,
    pub synthesize: Arc<StageClient>,
    pub caption: Arc<StageClient>,
    pub embed: Arc<StageClient>,
    pub image_features: Arc<StageClient>,
}

impl Backends {
    /// `transport(stage)` supplies the channel for each stage.
    pub fn from_transports(mut transport: impl FnMut(Stage) -> Arc<dyn Transport>) -> Self {
        let mut client = |s: Stage| Arc::new(StageClient::new(s, transport(s)));
        Self {
            recognize: client(Stage::Recognize),
            synthesize: client(Stage::Synthesize),
            caption: client(Stage::Caption),
            embed: client(Stage::Embed),
            image_features: client(Stage::ImageFeatures),
        }
    }

    pub fn get(&self, stage: Stage) -> &Arc<StageClient> {
        match stage {
            Stage::Recognize => &self.recognize,
            Stage::Synthesize => &self.synthesize,
            Stage::Caption => &self.caption,
            Stage::Embed => &self.embed,
            Stage::ImageFeatures => &self.image_features,
        }
    }

    /// Handshakes the given stages concurrently.
    pub async fn handshake(&self, stages: &[Stage], deadline: Duration) -> Result<(), ProtocolError> {
        let calls = stages.iter().map(|&s| self.get(s).handshake(deadline));
        futures::future::try_join_all(calls).await?;
        Ok(())
    }

    pub async fn handshake_all(&self, deadline: Duration) -> Result<(), ProtocolError> {
        self.handshake(&Stage::ALL, deadline).await
    }
}

impl From<DomainError> for ProtocolError {
    fn from(e: DomainError) -> Self {
        ProtocolError::InvalidRequest(e.to_string())
    }
}
