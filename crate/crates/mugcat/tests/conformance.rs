use std::sync::Arc;
use std::time::Duration;

use mugcat::conformance::{run_conformance, HintPolicy};
use mugcat::http::HttpTransport;
use mugcat::stub_server::serve_stubs;
use mugcat_core::protocol::{Stage, Transport};
use mugcat_core::stubs::{StubLatency, StubTransport};

const DEADLINE: Duration = Duration::from_secs(10);

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stub_servers_pass_over_http() {
    let servers = serve_stubs("127.0.0.1", 0, StubLatency::default()).await.unwrap();
    for stage in Stage::ALL {
        let transport: Arc<dyn Transport> = Arc::new(HttpTransport::new(format!("http://{}", servers.addr(stage))));
        let results = run_conformance(stage, transport, HintPolicy::Honored, DEADLINE).await;
        assert!(results.len() >= 5, "{stage}: {results:?}");
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }
    servers.shutdown().await;
}

#[tokio::test]
async fn in_process_stubs_pass() {
    for stage in Stage::ALL {
        let results = run_conformance(stage, Arc::new(StubTransport::new(stage)), HintPolicy::Honored, DEADLINE).await;
        assert!(results.iter().all(|r| r.passed), "{results:?}");
    }
}

#[tokio::test]
async fn hint_policy_is_enforced() {
    // stubs honor the hint, so a suite expecting it ignored must flag them
    let results =
        run_conformance(Stage::Recognize, Arc::new(StubTransport::new(Stage::Recognize)), HintPolicy::Ignored, DEADLINE)
            .await;
    let hint = results.iter().find(|r| r.check == "debug_label_hint").unwrap();
    assert!(!hint.passed);
    assert!(results.iter().filter(|r| r.check != "debug_label_hint").all(|r| r.passed));
}

#[tokio::test]
async fn mislabelled_backend_fails_handshake() {
    // an embedder answering on the recognizer's URL declares the wrong stage
    let results =
        run_conformance(Stage::Recognize, Arc::new(StubTransport::new(Stage::Embed)), HintPolicy::Honored, DEADLINE)
            .await;
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].check, "handshake");
    assert!(!results[0].passed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn plain_text_errors_are_flagged() {
    use axum::routing::get;
    use mugcat_core::protocol::BackendCapabilities;

    // handshakes correctly but answers everything else with a bare 500
    let caps = BackendCapabilities::new(Stage::Caption, "sloppy", "0");
    let caps_body = serde_json::to_string(&caps).unwrap();
    let app = axum::Router::new()
        .route("/v1/capabilities", get(move || async move { ([("content-type", "application/json")], caps_body) }))
        .fallback(|| async { (axum::http::StatusCode::INTERNAL_SERVER_ERROR, "boom") });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let transport = Arc::new(HttpTransport::new(format!("http://{addr}")));
    let results = run_conformance(Stage::Caption, transport, HintPolicy::Honored, DEADLINE).await;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.check).collect();
    assert!(results[0].passed, "{results:?}");
    for check in ["unknown_route", "wrong_stage_route", "malformed_body", "valid_request"] {
        assert!(failed.contains(&check), "{check} should fail: {results:?}");
    }
    server.abort();
}
