//! Deterministic reference backends for all five stages.
//!
//! Each stub is a pure function of its request. The synthesizer writes the
//! prompt into the first pixel bytes of every image it produces (see
//! [`stegano`]) and the captioner reads it back, so captions correlate with
//! the prompt and caption-based selection can be tested end to end without
//! any model weights.

pub mod stegano;

use std::sync::OnceLock;
use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;

use crate::codec::{fnv1a64, RgbImage, SplitMix64};
use crate::domain::{Caption, Clip, DomainError, Embedding, GeneratedImage, GlossPrediction, Resolution, SynthesisRequest};
use crate::protocol::{
    self, BackendCapabilities, CaptionRequest, CaptionResponse, Dims, EmbedRequest, EmbedResponse, ImageFeaturesRequest,
    ImageFeaturesResponse, RecognizeRequest, RecognizeResponse, Stage, SynthesizeResponse, Transport, TransportError,
    WireReply,
};

pub use self::stegano::{stegano_decode, stegano_encode, SteganoPayload};

/// Embedding dimension of the hashed bag-of-words embedder and of the
/// block-luma image features.
pub const STUB_DIM: usize = 64;
/// Confidence reported by the fingerprint recognizer.
pub const STUB_CONFIDENCE: f64 = 0.9;
/// Square input size declared by the stub recognizer.
pub const STUB_INPUT_SIDE: u32 = 32;
pub const UNRECOGNIZED_CAPTION: &str = "an unrecognized picture";

const FEATURE_GRID: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StubError {
    #[error("prompt payload of {needed} bytes exceeds image capacity {capacity}")]
    PayloadTooLarge { needed: usize, capacity: usize },
    #[error("empty text")]
    EmptyText,
    #[error("image smaller than the {FEATURE_GRID}x{FEATURE_GRID} feature grid")]
    ImageTooSmall,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// The bundled 100-gloss vocabulary.
pub fn vocabulary() -> &'static [&'static str] {
    static VOCAB: OnceLock<Vec<&'static str>> = OnceLock::new();
    VOCAB.get_or_init(|| include_str!("vocabulary.txt").split_whitespace().collect())
}

/// Fingerprints the center frame (`frames[len / 2]`) and maps it into the
/// vocabulary. A hint short-circuits to `[(hint, 1.0)]`.
pub fn stub_recognize(clip: &Clip, debug_label_hint: Option<&str>) -> Vec<GlossPrediction> {
    if let Some(hint) = debug_label_hint.filter(|h| !h.trim().is_empty()) {
        return vec![GlossPrediction::new(hint, 1.0).expect("non-empty hint")];
    }
    let vocab = vocabulary();
    let center = &clip.frames()[clip.len() / 2];
    let label = vocab[(fnv1a64(center.pixels()) % vocab.len() as u64) as usize];
    vec![GlossPrediction::new(label, STUB_CONFIDENCE).expect("vocabulary labels are valid")]
}

/// Raw RGB of candidate `i`: splitmix64 noise seeded with
/// `seed ^ i ^ fnv1a64(prompt)`, then the `"<prompt>|k=<i>"` payload at byte 0.
pub fn stub_candidate_rgb(request: &SynthesisRequest, i: u32) -> Result<RgbImage, StubError> {
    let (w, h) = (request.width(), request.height());
    let mut data = vec![0u8; w as usize * h as usize * 3];
    let state = request.seed() ^ u64::from(i) ^ fnv1a64(request.prompt().as_bytes());
    SplitMix64::new(state).fill_bytes(&mut data);
    stegano_encode(&mut data, &format!("{}|k={i}", request.prompt()))?;
    Ok(RgbImage { width: w, height: h, data })
}

/// K deterministic candidates at the requested resolution.
pub fn stub_synthesize(request: &SynthesisRequest) -> Result<Vec<GeneratedImage>, StubError> {
    (0..request.k())
        .map(|i| {
            let rgb = stub_candidate_rgb(request, i)?;
            let id = format!("{}/{i}", request.request_id());
            Ok(GeneratedImage::from_rgb(id, request.request_id(), i, &rgb)?)
        })
        .collect()
}

/// Reads the header payload back: `"P|k=0"` → "a photo of P",
/// `"P|k=i"` → "a photo of P variant i", otherwise "an unrecognized picture".
pub fn stub_caption(image: &GeneratedImage) -> Result<Caption, StubError> {
    let rgb = image.decode()?;
    let payload = stegano_decode(&rgb.data);
    let text = match payload.as_ref().and_then(|p| split_payload(&p.text)) {
        Some((prompt, 0)) => format!("a photo of {prompt}"),
        Some((prompt, i)) => format!("a photo of {prompt} variant {i}"),
        None => UNRECOGNIZED_CAPTION.to_string(),
    };
    Ok(Caption::new(image.image_id(), text)?)
}

fn split_payload(text: &str) -> Option<(&str, u32)> {
    let (prompt, idx) = text.rsplit_once("|k=")?;
    Some((prompt, idx.parse().ok()?))
}

/// Hashed bag of words: each lowercased whitespace token adds ±1 at
/// `fnv1a64(token) mod 64`, negative when bit 63 of the hash is set.
pub fn stub_embed(text: &str) -> Result<Embedding, StubError> {
    let lowered = text.to_lowercase();
    let mut tokens = lowered.split_whitespace().peekable();
    if tokens.peek().is_none() {
        return Err(StubError::EmptyText);
    }
    let mut v = vec![0.0; STUB_DIM];
    for t in tokens {
        let h = fnv1a64(t.as_bytes());
        v[(h % STUB_DIM as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    Ok(Embedding::new(v)?)
}

/// 8×8 block means of luma (`0.299R + 0.587G + 0.114B`) scaled to [0,1],
/// row-major.
pub fn stub_image_features_rgb(img: &RgbImage) -> Result<Embedding, StubError> {
    if img.width < FEATURE_GRID || img.height < FEATURE_GRID {
        return Err(StubError::ImageTooSmall);
    }
    let edge = |b: u32, n: u32| (u64::from(b) * u64::from(n) / u64::from(FEATURE_GRID)) as u32;
    let mut out = Vec::with_capacity(STUB_DIM);
    for by in 0..FEATURE_GRID {
        let (y0, y1) = (edge(by, img.height), edge(by + 1, img.height));
        for bx in 0..FEATURE_GRID {
            let (x0, x1) = (edge(bx, img.width), edge(bx + 1, img.width));
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [r, g, b] = img.pixel(x, y);
                    sum += 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
                }
            }
            let count = f64::from((y1 - y0) * (x1 - x0));
            out.push(sum / count / 255.0);
        }
    }
    Ok(Embedding::new(out)?)
}

pub fn stub_image_features(image: &GeneratedImage) -> Result<Embedding, StubError> {
    stub_image_features_rgb(&image.decode()?)
}

/// What each stub declares at handshake.
pub fn stub_capabilities(stage: Stage) -> BackendCapabilities {
    let mut caps = BackendCapabilities::new(stage, format!("stub-{}", stage.as_str()), env!("CARGO_PKG_VERSION"));
    match stage {
        Stage::Recognize => {
            caps.input_resolution = Some(Dims { width: STUB_INPUT_SIDE, height: STUB_INPUT_SIDE });
            caps.vocabulary_size = Some(vocabulary().len());
        }
        Stage::Synthesize => {
            caps.supported_resolutions = Some(Resolution::ALL.iter().map(|&r| r.into()).collect());
        }
        Stage::Embed | Stage::ImageFeatures => caps.embedding_dim = Some(STUB_DIM),
        Stage::Caption => {}
    }
    caps
}

// ---------------------------------------------------------------------------
// Serving
// ---------------------------------------------------------------------------

/// Injected delays, for benchmarks and timeout tests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StubLatency {
    /// Added to the capabilities handshake (simulated model load).
    pub handshake: Duration,
    /// Added to every stage call.
    pub per_call: Duration,
    /// Added per sampling step to synthesize calls.
    pub per_step: Duration,
}

impl StubLatency {
    pub fn for_request(&self, body: &[u8], stage: Stage) -> Duration {
        let mut d = self.per_call;
        if stage == Stage::Synthesize && !self.per_step.is_zero() {
            if let Ok(req) = protocol::decode::<SynthesisRequest>(body) {
                d += self.per_step * req.steps();
            }
        }
        d
    }
}

/// Protocol handler for one stub stage, shared by the HTTP server and the
/// in-process transport.
#[derive(Debug, Clone)]
pub struct StubService {
    stage: Stage,
    latency: StubLatency,
}

impl StubService {
    pub fn new(stage: Stage) -> Self {
        Self { stage, latency: StubLatency::default() }
    }

    pub fn with_latency(mut self, latency: StubLatency) -> Self {
        self.latency = latency;
        self
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub async fn handle_get(&self, path: &str) -> WireReply {
        if path != "/v1/capabilities" {
            return WireReply::error(404, "not_found", format!("no route GET {path}"));
        }
        if !self.latency.handshake.is_zero() {
            tokio::time::sleep(self.latency.handshake).await;
        }
        WireReply::ok(protocol::encode(&stub_capabilities(self.stage)))
    }

    pub async fn handle_post(&self, path: &str, body: &[u8]) -> WireReply {
        match Stage::from_route(path) {
            Some(s) if s == self.stage => {}
            Some(s) => {
                return WireReply::error(404, "wrong_stage", format!("this endpoint serves {}, not {s}", self.stage))
            }
            None => return WireReply::error(404, "not_found", format!("no route POST {path}")),
        }
        let delay = self.latency.for_request(body, self.stage);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        self.dispatch(body)
    }

    /// Synchronous core of `handle_post`, without routing or delays.
    pub fn dispatch(&self, body: &[u8]) -> WireReply {
        let bad_request = |e: protocol::DecodeError| WireReply::error(400, "bad_request", e.to_string());
        let failed = |e: StubError| match e {
            StubError::PayloadTooLarge { .. } => WireReply::error(422, "payload_too_large", e.to_string()),
            StubError::EmptyText => WireReply::error(422, "empty_text", e.to_string()),
            other => WireReply::error(422, "invalid_input", other.to_string()),
        };
        match self.stage {
            Stage::Recognize => match protocol::decode::<RecognizeRequest>(body) {
                Ok(req) => {
                    let predictions = stub_recognize(&req.clip, req.debug_label_hint.as_deref());
                    let resp = RecognizeResponse { clip_id: req.clip.clip_id().to_string(), predictions };
                    WireReply::ok(protocol::encode(&resp))
                }
                Err(e) => bad_request(e),
            },
            Stage::Synthesize => match protocol::decode::<SynthesisRequest>(body) {
                Ok(req) => match stub_synthesize(&req) {
                    Ok(images) => WireReply::ok(protocol::encode(&SynthesizeResponse {
                        request_id: req.request_id().to_string(),
                        images,
                    })),
                    Err(e) => failed(e),
                },
                Err(e) => bad_request(e),
            },
            Stage::Caption => match protocol::decode::<CaptionRequest>(body) {
                Ok(req) => match stub_caption(&req.image) {
                    Ok(caption) => WireReply::ok(protocol::encode(&CaptionResponse { caption })),
                    Err(e) => failed(e),
                },
                Err(e) => bad_request(e),
            },
            Stage::Embed => match protocol::decode::<EmbedRequest>(body) {
                Ok(req) => match stub_embed(&req.text) {
                    Ok(embedding) => WireReply::ok(protocol::encode(&EmbedResponse { embedding })),
                    Err(e) => failed(e),
                },
                Err(e) => bad_request(e),
            },
            Stage::ImageFeatures => match protocol::decode::<ImageFeaturesRequest>(body) {
                Ok(req) => match stub_image_features(&req.image) {
                    Ok(features) => WireReply::ok(protocol::encode(&ImageFeaturesResponse {
                        image_id: req.image.image_id().to_string(),
                        features,
                    })),
                    Err(e) => failed(e),
                },
                Err(e) => bad_request(e),
            },
        }
    }
}

/// Stub backend reached without a network hop. Bodies still go through the
/// full encode/decode path.
#[derive(Debug, Clone)]
pub struct StubTransport {
    service: StubService,
}

impl StubTransport {
    pub fn new(stage: Stage) -> Self {
        Self { service: StubService::new(stage) }
    }

    pub fn with_latency(stage: Stage, latency: StubLatency) -> Self {
        Self { service: StubService::new(stage).with_latency(latency) }
    }
}

#[async_trait]
impl Transport for StubTransport {
    fn endpoint(&self) -> String {
        format!("stub://{}", self.service.stage())
    }

    async fn get(&self, path: &str) -> Result<WireReply, TransportError> {
        Ok(self.service.handle_get(path).await)
    }

    async fn post(&self, path: &str, body: Vec<u8>) -> Result<WireReply, TransportError> {
        Ok(self.service.handle_post(path, &body).await)
    }
}

/// In-process stub backends for every stage.
pub fn stub_backends() -> protocol::Backends {
    protocol::Backends::from_transports(|s| std::sync::Arc::new(StubTransport::new(s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Frame;

    fn zero_clip() -> Clip {
        let frames = (0..16).map(|i| Frame::new(i, i * 40, 16, 16, vec![0u8; 768]).unwrap()).collect();
        Clip::new("z#0", "z", 25.0, frames).unwrap()
    }

    #[test]
    fn vocabulary_is_bundled() {
        let v = vocabulary();
        assert_eq!(v.len(), 100);
        assert!(v.contains(&"book") && v.contains(&"read"));
    }

    #[test]
    fn recognize_hint() {
        let p = stub_recognize(&zero_clip(), Some("book"));
        assert_eq!(p, vec![GlossPrediction::new("book", 1.0).unwrap()]);
    }

    #[test]
    fn recognize_zero_clip() {
        // fnv1a64 of 768 zero bytes = 0x9fa9e040e0eedf25 (oracle script); mod 100 -> index 33 "blue"
        assert_eq!(0x9fa9e040e0eedf25u64 % 100, 33);
        let p = stub_recognize(&zero_clip(), None);
        assert_eq!(p[0].label(), "blue");
        assert_eq!(p[0].confidence(), 0.9);
        assert_eq!(p, stub_recognize(&zero_clip(), None));
    }

    #[test]
    fn synthesize_and_caption() {
        let req = SynthesisRequest::new("r", "book read", 20, Resolution::W384H384, 2, 7).unwrap();
        let images = stub_synthesize(&req).unwrap();
        assert_eq!(images.len(), 2);
        let rgb = images[1].decode().unwrap();
        assert_eq!(stegano_decode(&rgb.data).unwrap().text, "book read|k=1");
        assert_eq!(stub_caption(&images[0]).unwrap().text(), "a photo of book read");
        assert_eq!(stub_caption(&images[1]).unwrap().text(), "a photo of book read variant 1");
        assert_eq!(stub_synthesize(&req).unwrap(), images);
    }

    #[test]
    fn k8_at_384() {
        let req = SynthesisRequest::new("r", "dog", 20, Resolution::W384H384, 8, 1).unwrap();
        let images = stub_synthesize(&req).unwrap();
        assert_eq!(images.len(), 8);
        assert!(images.iter().all(|i| i.dimensions() == (384, 384)));
    }

    #[test]
    fn variant_three_caption() {
        let req = SynthesisRequest::new("r", "book read", 20, Resolution::W384H384, 4, 0).unwrap();
        let img = &stub_synthesize(&req).unwrap()[3];
        assert_eq!(stub_caption(img).unwrap().text(), "a photo of book read variant 3");
    }

    #[test]
    fn plain_noise_is_unrecognized() {
        let mut data = vec![0u8; 32 * 32 * 3];
        SplitMix64::new(1).fill_bytes(&mut data);
        let img = GeneratedImage::from_rgb("n", "r", 0, &RgbImage::new(32, 32, data).unwrap()).unwrap();
        assert_eq!(stub_caption(&img).unwrap().text(), UNRECOGNIZED_CAPTION);
    }

    #[test]
    fn embed_book() {
        // fnv1a64("book") = 0xcd2fcd9bc6b008d8: index 24, bit 63 set -> -1
        let e = stub_embed("book").unwrap();
        let mut expected = vec![0.0; 64];
        expected[24] = -1.0;
        assert_eq!(e.as_slice(), expected.as_slice());
        let twice = stub_embed("book book").unwrap();
        assert_eq!(twice.as_slice()[24], -2.0);
        assert_eq!(crate::selection::cosine(e.as_slice(), twice.as_slice()).unwrap(), 1.0);
        assert_eq!(stub_embed(""), Err(StubError::EmptyText));
        assert_eq!(stub_embed("  \t "), Err(StubError::EmptyText));
    }

    #[test]
    fn features_white_and_black() {
        let white = RgbImage::new(16, 16, vec![255; 768]).unwrap();
        let f = stub_image_features_rgb(&white).unwrap();
        assert!(f.as_slice().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let black = RgbImage::new(16, 16, vec![0; 768]).unwrap();
        assert!(stub_image_features_rgb(&black).unwrap().is_zero());
    }

    #[test]
    fn features_half_white() {
        // left 8 columns white: blocks in columns 0-3 average to exactly 1
        let px: Vec<u8> = (0..16 * 16).flat_map(|i| if i % 16 < 8 { [255; 3] } else { [0; 3] }).collect();
        let f = stub_image_features_rgb(&RgbImage::new(16, 16, px).unwrap()).unwrap();
        for (i, &x) in f.as_slice().iter().enumerate() {
            let want = if i % 8 < 4 { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12, "block {i}: {x}");
        }
    }

    #[test]
    fn capabilities_valid() {
        for s in Stage::ALL {
            stub_capabilities(s).check().unwrap();
        }
    }

    #[tokio::test]
    async fn wrong_route_is_404() {
        let svc = StubService::new(Stage::Recognize);
        let reply = svc.handle_post("/v1/synthesize", b"{}").await;
        assert_eq!(reply.status, 404);
        assert_eq!(svc.handle_get("/v1/nope").await.status, 404);
    }

    #[test]
    fn bad_body_is_400() {
        let reply = StubService::new(Stage::Embed).dispatch(b"{\"txt\":1}");
        assert_eq!(reply.status, 400);
        let reply = StubService::new(Stage::Embed).dispatch(b"{\"text\":\"\"}");
        assert_eq!(reply.status, 422);
    }
}
