use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use mugcat_core::codec::RgbImage;
use mugcat_core::pipeline::PipelineEvent;
use mugcat_core::protocol::{
    self, BackendCapabilities, CaptionRequest, CaptionResponse, EmbedRequest, EmbedResponse, ErrorBody,
    ImageFeaturesRequest, ImageFeaturesResponse, ProtocolError, RecognizeRequest, RecognizeResponse, Stage,
    StageClient, StageResponse, SynthesizeResponse, Transport, TransportError, WireReply,
};
use mugcat_core::selection::{apply_scores, build_query, select};
use mugcat_core::stubs::{self, StubService, StubTransport};
use mugcat_core::{
    CandidatePair, Caption, Clip, ConversationTurn, Embedding, Frame, GeneratedImage, GlossPrediction,
    KeywordSequence, Resolution, SynthesisRequest, TimedStage,
};
use proptest::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

const RESOLUTIONS: [Resolution; 7] = [
    Resolution::W512H512,
    Resolution::W512H448,
    Resolution::W448H448,
    Resolution::W512H384,
    Resolution::W448H384,
    Resolution::W512H320,
    Resolution::W384H384,
];

/// decode(encode(x)) == x, and re-encoding reproduces the same bytes.
fn round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(value: &T) -> Result<(), TestCaseError> {
    let bytes = protocol::encode(value);
    let back: T = protocol::decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&back, value);
    prop_assert_eq!(protocol::encode(&back), bytes);
    Ok(())
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,10}"
}

fn prompt() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..5).prop_map(|w| w.join(" "))
}

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |x| x.is_finite())
}

fn embedding() -> impl Strategy<Value = Embedding> {
    prop::collection::vec(finite(), 1..70).prop_map(|v| Embedding::new(v).unwrap())
}

fn clip() -> impl Strategy<Value = Clip> {
    (1usize..4, 16u32..20, 16u32..20, any::<u64>(), 1.0f64..60.0).prop_flat_map(|(n, w, h, seed, fps)| {
        prop::collection::vec(any::<u8>(), (w * h * 3) as usize * n).prop_map(move |px| {
            let frames = px
                .chunks((w * h * 3) as usize)
                .enumerate()
                .map(|(i, c)| Frame::new(i as u64 * 2, i as u64 * 40, w, h, c.to_vec()).unwrap())
                .collect();
            Clip::new(format!("s{seed}#0"), format!("s{seed}"), fps, frames).unwrap()
        })
    })
}

fn image() -> impl Strategy<Value = GeneratedImage> {
    (16u32..24, 16u32..24, word(), 0u32..16).prop_flat_map(|(w, h, id, ord)| {
        prop::collection::vec(any::<u8>(), (w * h * 3) as usize).prop_map(move |data| {
            let rgb = RgbImage::new(w, h, data).unwrap();
            GeneratedImage::from_rgb(format!("{id}-{ord}"), id.clone(), ord, &rgb).unwrap()
        })
    })
}

fn request() -> impl Strategy<Value = SynthesisRequest> {
    (word(), prompt(), 1u32..=200, 0usize..7, 1u32..=16, any::<u64>())
        .prop_map(|(id, p, steps, r, k, seed)| SynthesisRequest::new(id, p, steps, RESOLUTIONS[r], k, seed).unwrap())
}

fn predictions() -> impl Strategy<Value = Vec<GlossPrediction>> {
    prop::collection::vec((word(), 0.0f64..=1.0), 1..=10).prop_map(|mut v| {
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.into_iter().map(|(l, c)| GlossPrediction::new(l, c).unwrap()).collect()
    })
}

/// A full turn assembled from the stub stages at a small resolution.
fn turn_from(prompt_words: &[String], k: u32, seed: u64, turn_id: u64, override_index: Option<usize>) -> ConversationTurn {
    let keywords = KeywordSequence::from_words(prompt_words.iter().cloned()).unwrap();
    let query = build_query(&keywords).unwrap();
    let req = SynthesisRequest::new(format!("turn-{turn_id}"), &query, 20, Resolution::W384H384, k, seed).unwrap();
    let images = stubs::stub_synthesize(&req).unwrap();
    let candidates: Vec<CandidatePair> = images
        .into_iter()
        .map(|img| {
            let cap = stubs::stub_caption(&img).unwrap();
            let emb = stubs::stub_embed(cap.text()).unwrap();
            CandidatePair::new(img, cap, emb).unwrap()
        })
        .collect();
    let selection = select(&candidates, &stubs::stub_embed(&query).unwrap()).unwrap();
    let candidates = apply_scores(candidates, &selection).unwrap();
    let timings: BTreeMap<TimedStage, f64> = TimedStage::ALL.iter().enumerate().map(|(i, &s)| (s, i as f64 * 1.25)).collect();
    let turn = ConversationTurn::new(turn_id, keywords, query, req, candidates, selection, timings).unwrap();
    match override_index {
        Some(i) => turn.with_override(i % k as usize).unwrap(),
        None => turn,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recognize_messages(clip in clip(), top_k in 1u32..=10, hint in prop::option::of(word()), preds in predictions()) {
        round_trip(&RecognizeRequest { clip: clip.clone(), top_k, debug_label_hint: hint })?;
        round_trip(&RecognizeResponse { clip_id: clip.clip_id().to_string(), predictions: preds })?;
    }

    #[test]
    fn synthesize_messages(req in request(), imgs in prop::collection::vec(image(), 1..4)) {
        round_trip(&req)?;
        round_trip(&SynthesizeResponse { request_id: req.request_id().to_string(), images: imgs })?;
    }

    #[test]
    fn caption_messages(img in image(), text in prompt()) {
        round_trip(&CaptionRequest { image: img.clone() })?;
        round_trip(&CaptionResponse { caption: Caption::new(img.image_id(), text).unwrap() })?;
    }

    #[test]
    fn embed_and_feature_messages(text in prompt(), e in embedding(), img in image()) {
        round_trip(&EmbedRequest { text })?;
        round_trip(&EmbedResponse { embedding: e.clone() })?;
        round_trip(&ImageFeaturesRequest { image: img.clone() })?;
        round_trip(&ImageFeaturesResponse { image_id: img.image_id().to_string(), features: e })?;
    }

    #[test]
    fn capabilities_and_errors(stage in 0usize..5, name in word(), version in "[0-9]\\.[0-9]", code in word(), msg in prompt()) {
        let mut caps = stubs::stub_capabilities(Stage::ALL[stage]);
        caps.name = name;
        caps.version = version;
        round_trip(&caps)?;
        round_trip(&ErrorBody::new(code, msg))?;
    }

    #[test]
    fn turns_and_events(words in prop::collection::vec(word(), 1..4), k in 1u32..=4, seed in any::<u64>(), id in 1u64..1000, ov in prop::option::of(0usize..4)) {
        let turn = turn_from(&words, k, seed, id, ov);
        round_trip(&turn)?;
        round_trip(&turn.keywords().clone())?;
        round_trip(&turn.selection().clone())?;
        round_trip(&turn.candidates()[0].clone())?;
        round_trip(&PipelineEvent::SelectionMade { turn: turn.clone() })?;
        round_trip(&PipelineEvent::CandidatesReady { turn_id: id, candidates: turn.candidates().to_vec() })?;
    }
}

#[test]
fn stage_responses_round_trip_through_stage_dispatch() {
    let req = SynthesisRequest::new("r", "book read", 20, Resolution::W384H384, 2, 7).unwrap();
    let images = stubs::stub_synthesize(&req).unwrap();
    let resp = StageResponse::Synthesize(SynthesizeResponse { request_id: "r".into(), images });
    assert_eq!(StageResponse::decode(Stage::Synthesize, &resp.encode()).unwrap(), resp);
    // the same bytes are not a caption reply
    assert!(StageResponse::decode(Stage::Caption, &resp.encode()).is_err());
}

#[test]
fn capabilities_of_every_stub_are_valid() {
    for stage in Stage::ALL {
        let caps: BackendCapabilities = protocol::decode(&protocol::encode(&stubs::stub_capabilities(stage))).unwrap();
        assert_eq!(caps.stage, stage);
    }
}

/// Stub synthesizer that drops the last image of every batch.
struct DropOne(StubService);

#[async_trait]
impl Transport for DropOne {
    fn endpoint(&self) -> String {
        "test://drop-one".into()
    }

    async fn get(&self, path: &str) -> Result<WireReply, TransportError> {
        Ok(self.0.handle_get(path).await)
    }

    async fn post(&self, path: &str, body: Vec<u8>) -> Result<WireReply, TransportError> {
        let mut reply = self.0.handle_post(path, &body).await;
        let mut resp: SynthesizeResponse = protocol::decode(&reply.body).unwrap();
        resp.images.pop();
        reply.body = protocol::encode(&resp);
        Ok(reply)
    }
}

#[tokio::test]
async fn k_mismatch_is_malformed_response() {
    let client = StageClient::new(Stage::Synthesize, Arc::new(DropOne(StubService::new(Stage::Synthesize))));
    client.handshake(Duration::from_secs(5)).await.unwrap();
    let req = SynthesisRequest::new("r", "book read", 20, Resolution::W384H384, 4, 7).unwrap();
    match client.synthesize(req, Duration::from_secs(5)).await {
        Err(ProtocolError::MalformedResponse { stage: Stage::Synthesize, message }) => {
            assert!(message.contains("3 images for k=4"), "{message}");
        }
        other => panic!("expected MalformedResponse, got {other:?}"),
    }
}

#[tokio::test]
async fn stage_mismatch_on_handshake() {
    let client = StageClient::new(Stage::Synthesize, Arc::new(StubTransport::new(Stage::Recognize)));
    match client.handshake(Duration::from_secs(5)).await {
        Err(ProtocolError::StageMismatch { expected: Stage::Synthesize, actual: Stage::Recognize }) => {}
        other => panic!("expected StageMismatch, got {other:?}"),
    }
}

#[tokio::test]
async fn call_before_handshake_is_rejected() {
    let client = StageClient::new(Stage::Embed, Arc::new(StubTransport::new(Stage::Embed)));
    assert!(matches!(
        client.embed("x", Duration::from_secs(1)).await,
        Err(ProtocolError::NotHandshaken { stage: Stage::Embed })
    ));
}
