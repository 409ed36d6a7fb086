//! Backend protocol conformance suite.
//!
//! Runs against any [`Transport`], so the same checks cover the in-process
//! stubs, the stub servers over HTTP and out-of-tree model adapters.

use std::sync::Arc;
use std::time::Duration;

use mugcat_core::codec::{encode_png, RgbImage};
use mugcat_core::ingest;
use mugcat_core::protocol::{
    self, BackendCapabilities, CaptionRequest, EmbedRequest, ErrorBody, ImageFeaturesRequest, RecognizeRequest,
    Stage, StageClient, StageRequest, Transport, PROTOCOL_VERSION,
};
use mugcat_core::{Clip, Frame, GeneratedImage, Resolution, SynthesisRequest};
use serde::Serialize;

/// What a recognizer must do with `debug_label_hint`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintPolicy {
    /// Stubs: the hint becomes the top prediction.
    Honored,
    /// Real models: predictions are identical with and without a hint.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub stage: Stage,
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}/{}", self.stage, self.check)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

struct Suite {
    stage: Stage,
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, check: &'static str, outcome: Result<(), String>) {
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e),
        };
        self.results.push(CheckResult { stage: self.stage, check, passed, detail });
    }
}

fn sample_clip(side: u32) -> Clip {
    let frames = (0..16u64)
        .map(|i| {
            let px: Vec<u8> = (0..side * side * 3).map(|j| (j as u64 * 7 + i * 13) as u8).collect();
            Frame::new(i, ingest::timestamp_for(i, 25.0), side, side, px).expect("valid frame")
        })
        .collect();
    Clip::new("conformance#0", "conformance", 25.0, frames).expect("valid clip")
}

fn sample_image() -> GeneratedImage {
    let (w, h) = (64u32, 48u32);
    let data: Vec<u8> = (0..h)
        .flat_map(|y| (0..w).flat_map(move |x| [(x * 4) as u8, (y * 5) as u8, ((x + y) * 2) as u8]))
        .collect();
    let rgb = RgbImage::new(w, h, data).expect("valid image");
    let png = encode_png(rgb.width, rgb.height, &rgb.data).expect("encodes");
    GeneratedImage::new("conformance/0", "conformance", 0, png).expect("valid png")
}

/// A well-formed request the stage must accept.
fn sample_request(stage: Stage, caps: &BackendCapabilities) -> StageRequest {
    match stage {
        Stage::Recognize => {
            let side = caps.input_resolution.map_or(32, |d| d.width.min(d.height).max(16));
            StageRequest::Recognize(RecognizeRequest { clip: sample_clip(side), top_k: 5, debug_label_hint: None })
        }
        Stage::Synthesize => {
            // smallest supported size keeps real models fast
            let res = caps
                .supported_resolutions
                .iter()
                .flatten()
                .filter_map(|d| Resolution::from_dims(d.width, d.height).ok())
                .min_by_key(|r| r.width() * r.height())
                .unwrap_or(Resolution::W384H384);
            let req = SynthesisRequest::new("conformance", "a red boat on a lake", 2, res, 3, 11).expect("valid request");
            StageRequest::Synthesize(req)
        }
        Stage::Caption => StageRequest::Caption(CaptionRequest { image: sample_image() }),
        Stage::Embed => StageRequest::Embed(EmbedRequest { text: "a red boat on a lake".into() }),
        Stage::ImageFeatures => StageRequest::ImageFeatures(ImageFeaturesRequest { image: sample_image() }),
    }
}

fn expect_error_body(status: u16, body: &[u8], want: std::ops::RangeInclusive<u16>) -> Result<(), String> {
    if !want.contains(&status) {
        return Err(format!("status {status}, expected {}..={}", want.start(), want.end()));
    }
    let e: ErrorBody = protocol::decode(body).map_err(|e| format!("error body: {e}"))?;
    if e.code.is_empty() {
        return Err("empty error code".into());
    }
    Ok(())
}

fn other_stage(stage: Stage) -> Stage {
    if stage == Stage::Embed {
        Stage::Caption
    } else {
        Stage::Embed
    }
}

/// Runs every check for `stage` against `transport`; never stops early.
pub async fn run_conformance(
    stage: Stage,
    transport: Arc<dyn Transport>,
    hints: HintPolicy,
    deadline: Duration,
) -> Vec<CheckResult> {
    let mut s = Suite { stage, results: Vec::new() };
    let client = StageClient::new(stage, transport.clone());

    let caps = match client.handshake(deadline).await {
        Ok(c) => c,
        Err(e) => {
            s.record("handshake", Err(e.to_string()));
            return s.results;
        }
    };
    s.record(
        "handshake",
        if caps.protocol_version == PROTOCOL_VERSION { Ok(()) } else { Err(format!("version {}", caps.protocol_version)) },
    );

    let outcome = match transport.get("/v1/no-such-route").await {
        Ok(r) => expect_error_body(r.status, &r.body, 404..=404),
        Err(e) => Err(e.0),
    };
    s.record("unknown_route", outcome);

    let outcome = match transport.post(other_stage(stage).route(), b"{}".to_vec()).await {
        Ok(r) => expect_error_body(r.status, &r.body, 400..=499),
        Err(e) => Err(e.0),
    };
    s.record("wrong_stage_route", outcome);

    let outcome = match transport.post(stage.route(), b"{\"truncated\":".to_vec()).await {
        Ok(r) => expect_error_body(r.status, &r.body, 400..=499),
        Err(e) => Err(e.0),
    };
    s.record("malformed_body", outcome);

    let request = sample_request(stage, &caps);
    let outcome = client.call_stage(request.clone(), deadline).await.map(|_| ()).map_err(|e| e.to_string());
    s.record("valid_request", outcome);

    match stage {
        Stage::Recognize => recognize_checks(&mut s, &client, request, hints, deadline).await,
        Stage::Synthesize => {
            let mut body: serde_json::Value = serde_json::from_slice(&request.encode()).expect("json");
            body["width"] = 100.into();
            body["height"] = 100.into();
            let outcome = match transport.post(stage.route(), serde_json::to_vec(&body).expect("json")).await {
                Ok(r) => expect_error_body(r.status, &r.body, 400..=499),
                Err(e) => Err(e.0),
            };
            s.record("unsupported_resolution", outcome);
        }
        Stage::Embed => {
            let outcome = match transport.post(stage.route(), protocol::encode(&EmbedRequest { text: "   ".into() })).await {
                Ok(r) => expect_error_body(r.status, &r.body, 400..=499),
                Err(e) => Err(e.0),
            };
            s.record("empty_text", outcome);
            let outcome = match caps.embedding_dim {
                Some(_) => Ok(()),
                None => Err("embedding_dim not declared".into()),
            };
            s.record("declares_dim", outcome);
        }
        Stage::ImageFeatures => {
            s.record("declares_dim", caps.embedding_dim.map(|_| ()).ok_or_else(|| "embedding_dim not declared".into()));
        }
        Stage::Caption => {}
    }
    s.results
}

async fn recognize_checks(
    s: &mut Suite,
    client: &StageClient,
    request: StageRequest,
    hints: HintPolicy,
    deadline: Duration,
) {
    let StageRequest::Recognize(req) = request else { unreachable!("recognize request") };
    let top1 = StageRequest::Recognize(RecognizeRequest { top_k: 1, ..req.clone() });
    let outcome = match client.call_stage(top1, deadline).await {
        Ok(_) => Ok(()),
        Err(e) => Err(e.to_string()),
    };
    s.record("top_k_respected", outcome);

    let plain = client.recognize(req.clip.clone(), None, deadline).await;
    let hinted = client.recognize(req.clip.clone(), Some("conformance-hint".into()), deadline).await;
    let outcome = match (plain, hinted) {
        (Ok(p), Ok(h)) => match hints {
            HintPolicy::Ignored if p.value == h.value => Ok(()),
            HintPolicy::Ignored => Err("predictions change with debug_label_hint".into()),
            HintPolicy::Honored if h.value[0].label() == "conformance-hint" => Ok(()),
            HintPolicy::Honored => Err(format!("hint not honored, top-1 is {}", h.value[0].label())),
        },
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    s.record("debug_label_hint", outcome);
}
