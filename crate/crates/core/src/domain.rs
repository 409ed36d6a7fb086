//! Shared value types.
//!
//! Every type validates its invariants on construction and on JSON decode
//! (decoding goes through a plain wire struct and `TryFrom`), so an invalid
//! value cannot be obtained through the public surface. All types are
//! immutable once built and cheap to clone where they carry pixel data.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, b64, RgbImage};

/// Smallest accepted frame side, in pixels.
pub const MIN_FRAME_SIDE: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid frame {index}: {reason}")]
    InvalidFrame { index: u64, reason: String },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid gloss prediction: {0}")]
    InvalidPrediction(String),
    #[error("invalid keyword sequence: {0}")]
    InvalidKeywords(String),
    #[error("resolution {width}x{height} is not one of the supported sizes")]
    InvalidResolution { width: u32, height: u32 },
    #[error("invalid synthesis request: {0}")]
    InvalidRequest(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid caption: {0}")]
    InvalidCaption(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("invalid turn: {0}")]
    InvalidTurn(String),
    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
}

// ---------------------------------------------------------------------------
// Frames and clips
// ---------------------------------------------------------------------------

/// One RGB8 video frame.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrameWire")]
pub struct Frame {
    index: u64,
    timestamp_ms: u64,
    width: u32,
    height: u32,
    #[serde(serialize_with = "b64::serialize")]
    pixels: Arc<[u8]>,
}

#[derive(Deserialize)]
struct FrameWire {
    index: u64,
    timestamp_ms: u64,
    width: u32,
    height: u32,
    #[serde(deserialize_with = "b64::deserialize")]
    pixels: Arc<[u8]>,
}

impl TryFrom<FrameWire> for Frame {
    type Error = DomainError;

    fn try_from(w: FrameWire) -> Result<Self, DomainError> {
        Frame::new(w.index, w.timestamp_ms, w.width, w.height, w.pixels)
    }
}

impl Frame {
    pub fn new(
        index: u64,
        timestamp_ms: u64,
        width: u32,
        height: u32,
        pixels: impl Into<Arc<[u8]>>,
    ) -> Result<Self, DomainError> {
        let pixels = pixels.into();
        let bad = |reason: String| DomainError::InvalidFrame { index, reason };
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(bad(format!("{width}x{height} is below the {MIN_FRAME_SIDE}px minimum")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(bad(format!("{} pixel bytes, expected {expected}", pixels.len())));
        }
        Ok(Self { index, timestamp_ms, width, height, pixels })
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Same pixels under a new index/timestamp.
    pub fn renumbered(&self, index: u64, timestamp_ms: u64) -> Self {
        Self { index, timestamp_ms, ..self.clone() }
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("index", &self.index)
            .field("timestamp_ms", &self.timestamp_ms)
            .field("size", &format_args!("{}x{}", self.width, self.height))
            .finish_non_exhaustive()
    }
}

/// A fixed window of frames sent to the recognizer as one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClipWire")]
pub struct Clip {
    clip_id: String,
    source_id: String,
    fps: f64,
    frames: Vec<Frame>,
}

#[derive(Deserialize)]
struct ClipWire {
    clip_id: String,
    source_id: String,
    fps: f64,
    frames: Vec<Frame>,
}

impl TryFrom<ClipWire> for Clip {
    type Error = DomainError;

    fn try_from(w: ClipWire) -> Result<Self, DomainError> {
        Clip::new(w.clip_id, w.source_id, w.fps, w.frames)
    }
}

impl Clip {
    pub fn new(
        clip_id: impl Into<String>,
        source_id: impl Into<String>,
        fps: f64,
        frames: Vec<Frame>,
    ) -> Result<Self, DomainError> {
        let clip_id = clip_id.into();
        let bad = |m: String| DomainError::InvalidClip(m);
        if clip_id.is_empty() {
            return Err(bad("empty clip_id".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(bad(format!("fps must be positive, got {fps}")));
        }
        let first = frames.first().ok_or_else(|| bad("no frames".into()))?;
        let (w, h) = (first.width, first.height);
        for pair in frames.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.width != w || b.height != h {
                return Err(bad(format!("frame {} is {}x{}, clip is {w}x{h}", b.index, b.width, b.height)));
            }
            if b.index <= a.index {
                return Err(bad(format!("frame index {} follows {}", b.index, a.index)));
            }
            if b.timestamp_ms < a.timestamp_ms {
                return Err(bad(format!("timestamp goes backwards at frame {}", b.index)));
            }
        }
        Ok(Self { clip_id, source_id: source_id.into(), fps, frames })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

// ---------------------------------------------------------------------------
// Recognition output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GlossWire")]
pub struct GlossPrediction {
    label: String,
    confidence: f64,
}

#[derive(Deserialize)]
struct GlossWire {
    label: String,
    confidence: f64,
}

impl TryFrom<GlossWire> for GlossPrediction {
    type Error = DomainError;

    fn try_from(w: GlossWire) -> Result<Self, DomainError> {
        GlossPrediction::new(w.label, w.confidence)
    }
}

impl GlossPrediction {
    pub fn new(label: impl Into<String>, confidence: f64) -> Result<Self, DomainError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(DomainError::InvalidPrediction("empty label".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DomainError::InvalidPrediction(format!("confidence {confidence} outside [0,1]")));
        }
        Ok(Self { label, confidence })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Accepted glosses in acceptance order, with the clip each came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KeywordsWire")]
pub struct KeywordSequence {
    keywords: Vec<String>,
    accepted_at: Vec<String>,
}

#[derive(Deserialize)]
struct KeywordsWire {
    keywords: Vec<String>,
    accepted_at: Vec<String>,
}

impl TryFrom<KeywordsWire> for KeywordSequence {
    type Error = DomainError;

    fn try_from(w: KeywordsWire) -> Result<Self, DomainError> {
        if w.keywords.len() != w.accepted_at.len() {
            return Err(DomainError::InvalidKeywords(format!(
                "{} keywords but {} provenance entries",
                w.keywords.len(),
                w.accepted_at.len()
            )));
        }
        let mut seq = KeywordSequence::new();
        for (k, at) in w.keywords.into_iter().zip(w.accepted_at) {
            seq.push(k, at)?;
        }
        Ok(seq)
    }
}

impl KeywordSequence {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a sequence without clip provenance (e.g. typed keywords).
    pub fn from_words<I, S>(words: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seq = Self::new();
        for (i, w) in words.into_iter().enumerate() {
            seq.push(w, format!("manual#{i}"))?;
        }
        Ok(seq)
    }

    pub fn push(&mut self, label: impl Into<String>, clip_id: impl Into<String>) -> Result<(), DomainError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(DomainError::InvalidKeywords("empty label".into()));
        }
        self.keywords.push(label);
        self.accepted_at.push(clip_id.into());
        Ok(())
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn accepted_at(&self) -> &[String] {
        &self.accepted_at
    }

    pub fn last(&self) -> Option<&str> {
        self.keywords.last().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// The seven output sizes, ordered by decreasing synthesis time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resolution {
    #[default]
    W512H512,
    W512H448,
    W448H448,
    W512H384,
    W448H384,
    W512H320,
    W384H384,
}

impl Resolution {
    pub const ALL: [Resolution; 7] = [
        Resolution::W512H512,
        Resolution::W512H448,
        Resolution::W448H448,
        Resolution::W512H384,
        Resolution::W448H384,
        Resolution::W512H320,
        Resolution::W384H384,
    ];

    pub fn dims(self) -> (u32, u32) {
        match self {
            Resolution::W512H512 => (512, 512),
            Resolution::W512H448 => (512, 448),
            Resolution::W448H448 => (448, 448),
            Resolution::W512H384 => (512, 384),
            Resolution::W448H384 => (448, 384),
            Resolution::W512H320 => (512, 320),
            Resolution::W384H384 => (384, 384),
        }
    }

    pub fn width(self) -> u32 {
        self.dims().0
    }

    pub fn height(self) -> u32 {
        self.dims().1
    }

    pub fn from_dims(width: u32, height: u32) -> Result<Self, DomainError> {
        Self::ALL
            .into_iter()
            .find(|r| r.dims() == (width, height))
            .ok_or(DomainError::InvalidResolution { width, height })
    }
}


impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (w, h) = self.dims();
        write!(f, "{w}x{h}")
    }
}

impl std::str::FromStr for Resolution {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, DomainError> {
        let bad = || DomainError::InvalidResolution { width: 0, height: 0 };
        let (w, h) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
        let w = w.trim().parse().map_err(|_| bad())?;
        let h = h.trim().parse().map_err(|_| bad())?;
        Self::from_dims(w, h)
    }
}

pub const MAX_STEPS: u32 = 200;
pub const DEFAULT_STEPS: u32 = 20;
pub const DEFAULT_K: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SynthesisWire")]
pub struct SynthesisRequest {
    request_id: String,
    prompt: String,
    steps: u32,
    width: u32,
    height: u32,
    k: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct SynthesisWire {
    request_id: String,
    prompt: String,
    #[serde(default = "default_steps")]
    steps: u32,
    #[serde(default = "default_width")]
    width: u32,
    #[serde(default = "default_height")]
    height: u32,
    #[serde(default = "default_k")]
    k: u32,
    #[serde(default)]
    seed: u64,
}

fn default_steps() -> u32 {
    DEFAULT_STEPS
}
fn default_width() -> u32 {
    Resolution::default().width()
}
fn default_height() -> u32 {
    Resolution::default().height()
}
fn default_k() -> u32 {
    DEFAULT_K
}

impl TryFrom<SynthesisWire> for SynthesisRequest {
    type Error = DomainError;

    fn try_from(w: SynthesisWire) -> Result<Self, DomainError> {
        let res = Resolution::from_dims(w.width, w.height)?;
        SynthesisRequest::new(w.request_id, w.prompt, w.steps, res, w.k, w.seed)
    }
}

impl SynthesisRequest {
    pub fn new(
        request_id: impl Into<String>,
        prompt: impl Into<String>,
        steps: u32,
        resolution: Resolution,
        k: u32,
        seed: u64,
    ) -> Result<Self, DomainError> {
        let request_id = request_id.into();
        let prompt = prompt.into();
        if request_id.is_empty() {
            return Err(DomainError::InvalidRequest("empty request_id".into()));
        }
        if prompt.trim().is_empty() {
            return Err(DomainError::InvalidRequest("empty prompt".into()));
        }
        if !(1..=MAX_STEPS).contains(&steps) {
            return Err(DomainError::InvalidRequest(format!("steps {steps} outside [1, {MAX_STEPS}]")));
        }
        if k == 0 {
            return Err(DomainError::InvalidRequest("k must be at least 1".into()));
        }
        let (width, height) = resolution.dims();
        Ok(Self { request_id, prompt, steps, width, height, k, seed })
    }

    /// Request with every knob at its default.
    pub fn with_defaults(request_id: impl Into<String>, prompt: impl Into<String>) -> Result<Self, DomainError> {
        Self::new(request_id, prompt, DEFAULT_STEPS, Resolution::default(), DEFAULT_K, 0)
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::from_dims(self.width, self.height).expect("validated at construction")
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// One synthesized candidate image.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ImageWire")]
pub struct GeneratedImage {
    image_id: String,
    request_ref: String,
    ordinal: u32,
    #[serde(serialize_with = "b64::serialize")]
    png_bytes: Arc<[u8]>,
}

#[derive(Deserialize)]
struct ImageWire {
    image_id: String,
    request_ref: String,
    ordinal: u32,
    #[serde(deserialize_with = "b64::deserialize")]
    png_bytes: Arc<[u8]>,
}

impl TryFrom<ImageWire> for GeneratedImage {
    type Error = DomainError;

    fn try_from(w: ImageWire) -> Result<Self, DomainError> {
        GeneratedImage::new(w.image_id, w.request_ref, w.ordinal, w.png_bytes)
    }
}

impl GeneratedImage {
    pub fn new(
        image_id: impl Into<String>,
        request_ref: impl Into<String>,
        ordinal: u32,
        png_bytes: impl Into<Arc<[u8]>>,
    ) -> Result<Self, DomainError> {
        let image_id = image_id.into();
        let png_bytes = png_bytes.into();
        if image_id.is_empty() {
            return Err(DomainError::InvalidImage("empty image_id".into()));
        }
        codec::png_dimensions(&png_bytes).map_err(|e| DomainError::InvalidImage(e.to_string()))?;
        Ok(Self { image_id, request_ref: request_ref.into(), ordinal, png_bytes })
    }

    /// Encodes raw RGB8 canonically and wraps it.
    pub fn from_rgb(
        image_id: impl Into<String>,
        request_ref: impl Into<String>,
        ordinal: u32,
        image: &RgbImage,
    ) -> Result<Self, DomainError> {
        let bytes = codec::encode_png(image.width, image.height, &image.data)
            .map_err(|e| DomainError::InvalidImage(e.to_string()))?;
        Self::new(image_id, request_ref, ordinal, bytes)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn request_ref(&self) -> &str {
        &self.request_ref
    }

    pub fn ordinal(&self) -> u32 {
        self.ordinal
    }

    pub fn png_bytes(&self) -> &[u8] {
        &self.png_bytes
    }

    pub fn dimensions(&self) -> (u32, u32) {
        codec::png_dimensions(&self.png_bytes).expect("validated at construction")
    }

    pub fn decode(&self) -> Result<RgbImage, DomainError> {
        codec::decode_png(&self.png_bytes).map_err(|e| DomainError::InvalidImage(e.to_string()))
    }
}

impl fmt::Debug for GeneratedImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratedImage")
            .field("image_id", &self.image_id)
            .field("request_ref", &self.request_ref)
            .field("ordinal", &self.ordinal)
            .field("png_len", &self.png_bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CaptionWire")]
pub struct Caption {
    image_ref: String,
    text: String,
}

#[derive(Deserialize)]
struct CaptionWire {
    image_ref: String,
    text: String,
}

impl TryFrom<CaptionWire> for Caption {
    type Error = DomainError;

    fn try_from(w: CaptionWire) -> Result<Self, DomainError> {
        Caption::new(w.image_ref, w.text)
    }
}

impl Caption {
    pub fn new(image_ref: impl Into<String>, text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::InvalidCaption("empty text".into()));
        }
        Ok(Self { image_ref: image_ref.into(), text })
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Sentence embedding or image feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingWire")]
pub struct Embedding {
    vector: Vec<f64>,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbeddingWire {
    vector: Vec<f64>,
    dim: usize,
}

impl TryFrom<EmbeddingWire> for Embedding {
    type Error = DomainError;

    fn try_from(w: EmbeddingWire) -> Result<Self, DomainError> {
        if w.vector.len() != w.dim {
            return Err(DomainError::InvalidEmbedding(format!(
                "dim {} but {} components",
                w.dim,
                w.vector.len()
            )));
        }
        Embedding::new(w.vector)
    }
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self, DomainError> {
        if vector.is_empty() {
            return Err(DomainError::InvalidEmbedding("zero-length vector".into()));
        }
        if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
            return Err(DomainError::InvalidEmbedding(format!("component {i} is not finite")));
        }
        let dim = vector.len();
        Ok(Self { vector, dim })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&x| x == 0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }
}

// ---------------------------------------------------------------------------
// Selection and turns
// ---------------------------------------------------------------------------

/// One candidate image with its caption, caption embedding and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateWire")]
pub struct CandidatePair {
    image: GeneratedImage,
    caption: Caption,
    caption_embedding: Embedding,
    score: f64,
}

#[derive(Deserialize)]
struct CandidateWire {
    image: GeneratedImage,
    caption: Caption,
    caption_embedding: Embedding,
    score: f64,
}

impl TryFrom<CandidateWire> for CandidatePair {
    type Error = DomainError;

    fn try_from(w: CandidateWire) -> Result<Self, DomainError> {
        CandidatePair::new(w.image, w.caption, w.caption_embedding)?.with_score(w.score)
    }
}

impl CandidatePair {
    /// Score starts at 0 until selection fills it.
    pub fn new(image: GeneratedImage, caption: Caption, caption_embedding: Embedding) -> Result<Self, DomainError> {
        if caption.image_ref() != image.image_id() {
            return Err(DomainError::InvalidTurn(format!(
                "caption for {} attached to image {}",
                caption.image_ref(),
                image.image_id()
            )));
        }
        Ok(Self { image, caption, caption_embedding, score: 0.0 })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, DomainError> {
        if !(-1.0..=1.0).contains(&score) {
            return Err(DomainError::InvalidSelection(format!("score {score} outside [-1,1]")));
        }
        self.score = score;
        Ok(self)
    }

    pub fn image(&self) -> &GeneratedImage {
        &self.image
    }

    pub fn caption(&self) -> &Caption {
        &self.caption
    }

    pub fn caption_embedding(&self) -> &Embedding {
        &self.caption_embedding
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Argmax outcome over candidate captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SelectionWire")]
pub struct SelectionResult {
    selected_index: usize,
    selected_image: String,
    selected_caption: String,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
struct SelectionWire {
    selected_index: usize,
    selected_image: String,
    selected_caption: String,
    scores: Vec<f64>,
}

impl TryFrom<SelectionWire> for SelectionResult {
    type Error = DomainError;

    fn try_from(w: SelectionWire) -> Result<Self, DomainError> {
        SelectionResult::new(w.selected_index, w.selected_image, w.selected_caption, w.scores)
    }
}

impl SelectionResult {
    pub fn new(
        selected_index: usize,
        selected_image: impl Into<String>,
        selected_caption: impl Into<String>,
        scores: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let bad = |m: String| DomainError::InvalidSelection(m);
        if scores.is_empty() {
            return Err(bad("no scores".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(bad(format!("score {s} outside [-1,1]")));
        }
        if selected_index >= scores.len() {
            return Err(DomainError::IndexOutOfRange { index: selected_index, len: scores.len() });
        }
        let chosen = scores[selected_index];
        if let Some(j) = scores.iter().position(|&s| s >= chosen) {
            if j != selected_index || scores.iter().any(|&s| s > chosen) {
                return Err(bad(format!("index {selected_index} is not the first maximum")));
            }
        }
        Ok(Self {
            selected_index,
            selected_image: selected_image.into(),
            selected_caption: selected_caption.into(),
            scores,
        })
    }

    pub fn selected_index(&self) -> usize {
        self.selected_index
    }

    pub fn selected_image(&self) -> &str {
        &self.selected_image
    }

    pub fn selected_caption(&self) -> &str {
        &self.selected_caption
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn best_score(&self) -> f64 {
        self.scores[self.selected_index]
    }
}

/// Pipeline stages that carry a wall-time entry on every turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimedStage {
    Recognize,
    Synthesize,
    Caption,
    Embed,
    Select,
}

impl TimedStage {
    pub const ALL: [TimedStage; 5] = [
        TimedStage::Recognize,
        TimedStage::Synthesize,
        TimedStage::Caption,
        TimedStage::Embed,
        TimedStage::Select,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TimedStage::Recognize => "recognize",
            TimedStage::Synthesize => "synthesize",
            TimedStage::Caption => "caption",
            TimedStage::Embed => "embed",
            TimedStage::Select => "select",
        }
    }
}

impl fmt::Display for TimedStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type StageTimings = BTreeMap<TimedStage, f64>;

/// One completed conversational unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TurnWire")]
pub struct ConversationTurn {
    turn_id: u64,
    keywords: KeywordSequence,
    query_text: String,
    request: SynthesisRequest,
    candidates: Vec<CandidatePair>,
    selection: SelectionResult,
    stage_timings_ms: StageTimings,
    #[serde(rename = "override")]
    override_index: Option<usize>,
}

#[derive(Deserialize)]
struct TurnWire {
    turn_id: u64,
    keywords: KeywordSequence,
    query_text: String,
    request: SynthesisRequest,
    candidates: Vec<CandidatePair>,
    selection: SelectionResult,
    stage_timings_ms: StageTimings,
    #[serde(rename = "override")]
    override_index: Option<usize>,
}

impl TryFrom<TurnWire> for ConversationTurn {
    type Error = DomainError;

    fn try_from(w: TurnWire) -> Result<Self, DomainError> {
        let turn = ConversationTurn::new(
            w.turn_id,
            w.keywords,
            w.query_text,
            w.request,
            w.candidates,
            w.selection,
            w.stage_timings_ms,
        )?;
        match w.override_index {
            Some(i) => turn.with_override(i),
            None => Ok(turn),
        }
    }
}

impl ConversationTurn {
    pub fn new(
        turn_id: u64,
        keywords: KeywordSequence,
        query_text: impl Into<String>,
        request: SynthesisRequest,
        candidates: Vec<CandidatePair>,
        selection: SelectionResult,
        stage_timings_ms: StageTimings,
    ) -> Result<Self, DomainError> {
        let bad = |m: String| DomainError::InvalidTurn(m);
        let k = request.k() as usize;
        if candidates.len() != k {
            return Err(bad(format!("{} candidates for k={k}", candidates.len())));
        }
        if selection.scores().len() != k {
            return Err(bad(format!("{} scores for k={k}", selection.scores().len())));
        }
        let chosen = &candidates[selection.selected_index()];
        if chosen.image().image_id() != selection.selected_image()
            || chosen.caption().text() != selection.selected_caption()
        {
            return Err(bad("selection does not match the chosen candidate".into()));
        }
        for stage in TimedStage::ALL {
            match stage_timings_ms.get(&stage) {
                Some(ms) if ms.is_finite() && *ms >= 0.0 => {}
                Some(ms) => return Err(bad(format!("{stage} timing {ms} is negative"))),
                None => return Err(bad(format!("missing {stage} timing"))),
            }
        }
        Ok(Self {
            turn_id,
            keywords,
            query_text: query_text.into(),
            request,
            candidates,
            selection,
            stage_timings_ms,
            override_index: None,
        })
    }

    /// Records a human choice next to (not instead of) the model's selection.
    pub fn with_override(mut self, index: usize) -> Result<Self, DomainError> {
        if index >= self.candidates.len() {
            return Err(DomainError::IndexOutOfRange { index, len: self.candidates.len() });
        }
        self.override_index = Some(index);
        Ok(self)
    }

    pub fn turn_id(&self) -> u64 {
        self.turn_id
    }

    pub fn keywords(&self) -> &KeywordSequence {
        &self.keywords
    }

    pub fn query_text(&self) -> &str {
        &self.query_text
    }

    pub fn request(&self) -> &SynthesisRequest {
        &self.request
    }

    pub fn candidates(&self) -> &[CandidatePair] {
        &self.candidates
    }

    pub fn selection(&self) -> &SelectionResult {
        &self.selection
    }

    pub fn stage_timings_ms(&self) -> &StageTimings {
        &self.stage_timings_ms
    }

    pub fn override_index(&self) -> Option<usize> {
        self.override_index
    }

    /// Candidate the UI should highlight: the override if set, else the selection.
    pub fn effective_index(&self) -> usize {
        self.override_index.unwrap_or(self.selection.selected_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(i: u64) -> Frame {
        Frame::new(i, i * 40, 16, 16, vec![0u8; 16 * 16 * 3]).unwrap()
    }

    #[test]
    fn frame_rejects_bad_sizes() {
        assert!(Frame::new(0, 0, 8, 16, vec![0; 8 * 16 * 3]).is_err());
        assert!(Frame::new(0, 0, 16, 16, vec![0; 10]).is_err());
    }

    #[test]
    fn clip_requires_increasing_indices() {
        assert!(Clip::new("c", "s", 25.0, vec![frame(0), frame(1)]).is_ok());
        assert!(Clip::new("c", "s", 25.0, vec![frame(1), frame(1)]).is_err());
        assert!(Clip::new("c", "s", 25.0, vec![]).is_err());
        assert!(Clip::new("c", "s", 0.0, vec![frame(0)]).is_err());
    }

    #[test]
    fn clip_rejects_mixed_sizes() {
        let big = Frame::new(1, 40, 32, 32, vec![0u8; 32 * 32 * 3]).unwrap();
        assert!(matches!(Clip::new("c", "s", 25.0, vec![frame(0), big]), Err(DomainError::InvalidClip(_))));
    }

    #[test]
    fn resolution_set() {
        assert_eq!(Resolution::ALL.len(), 7);
        assert!(Resolution::from_dims(500, 500).is_err());
        assert_eq!("448x384".parse::<Resolution>().unwrap(), Resolution::W448H384);
    }

    #[test]
    fn synthesis_defaults_on_decode() {
        let r: SynthesisRequest = serde_json::from_str(r#"{"request_id":"r","prompt":"book"}"#).unwrap();
        assert_eq!((r.steps(), r.k(), r.width(), r.height()), (20, 8, 512, 512));
        assert!(serde_json::from_str::<SynthesisRequest>(r#"{"request_id":"r","prompt":"p","steps":0}"#).is_err());
        assert!(serde_json::from_str::<SynthesisRequest>(r#"{"request_id":"r","prompt":"p","steps":201}"#).is_err());
    }

    #[test]
    fn selection_requires_first_maximum() {
        assert!(SelectionResult::new(0, "a", "x", vec![0.5, 0.5]).is_ok());
        assert!(SelectionResult::new(1, "b", "y", vec![0.5, 0.5]).is_err());
        assert!(SelectionResult::new(0, "a", "x", vec![0.1, 0.5]).is_err());
        assert!(SelectionResult::new(0, "a", "x", vec![1.5]).is_err());
    }

    #[test]
    fn gloss_bounds() {
        assert!(GlossPrediction::new("book", 1.0).is_ok());
        assert!(GlossPrediction::new("book", 1.01).is_err());
        assert!(GlossPrediction::new("", 0.5).is_err());
        assert!(GlossPrediction::new("book", f64::NAN).is_err());
    }

    #[test]
    fn embedding_dim_checked_on_decode() {
        assert!(serde_json::from_str::<Embedding>(r#"{"vector":[1.0,2.0],"dim":3}"#).is_err());
        let e: Embedding = serde_json::from_str(r#"{"vector":[1.0,2.0],"dim":2}"#).unwrap();
        assert_eq!(e.dim(), 2);
    }

    #[test]
    fn keyword_provenance_lengths_must_match() {
        assert!(serde_json::from_str::<KeywordSequence>(r#"{"keywords":["a"],"accepted_at":[]}"#).is_err());
    }
}
