//! HTTP transport for remote stage backends.

use std::sync::Arc;

use async_trait::async_trait;
use mugcat_core::config::StageEndpoints;
use mugcat_core::protocol::{Backends, Stage, Transport, TransportError, WireReply};
use mugcat_core::stubs::{StubLatency, StubTransport};

#[derive(Debug, Clone)]
pub struct HttpTransport {
    base: String,
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self { base, client: reqwest::Client::new() }
    }

    async fn finish(resp: Result<reqwest::Response, reqwest::Error>) -> Result<WireReply, TransportError> {
        let resp = resp.map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(|e| TransportError(e.to_string()))?;
        Ok(WireReply { status, body: body.to_vec() })
    }
}

#[async_trait]
impl Transport for HttpTransport {
    fn endpoint(&self) -> String {
        self.base.clone()
    }

    async fn get(&self, path: &str) -> Result<WireReply, TransportError> {
        Self::finish(self.client.get(format!("{}{path}", self.base)).send().await).await
    }

    async fn post(&self, path: &str, body: Vec<u8>) -> Result<WireReply, TransportError> {
        let req = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body);
        Self::finish(req.send().await).await
    }
}

fn endpoint_for(endpoints: &StageEndpoints, stage: Stage) -> Option<&str> {
    match stage {
        Stage::Recognize => endpoints.recognize.as_deref(),
        Stage::Synthesize => endpoints.synthesize.as_deref(),
        Stage::Caption => endpoints.caption.as_deref(),
        Stage::Embed => endpoints.embed.as_deref(),
        Stage::ImageFeatures => endpoints.image_features.as_deref(),
    }
}

/// HTTP clients for stages with a configured URL; in-process stubs with
/// `latency` for the rest.
pub fn backends_for(endpoints: &StageEndpoints, latency: StubLatency) -> Backends {
    Backends::from_transports(|stage| match endpoint_for(endpoints, stage) {
        Some(url) => Arc::new(HttpTransport::new(url)),
        None => Arc::new(StubTransport::with_latency(stage, latency)),
    })
}
