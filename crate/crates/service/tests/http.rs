use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sketchsmith::router;
use sketchsmith_core::llm::{ProviderError, ScriptedProvider};
use sketchsmith_core::{Catalog, LoopPolicy, SessionService, Toolchain, ToolchainConfig};
use tower::ServiceExt;

const GOOD: &str = "```cpp\nconst int PAW_TARGET = 50;\nvoid setup() {\n}\nvoid loop() {\n}\n```";
const BROKEN: &str = "```cpp\n#error nope\nvoid setup() {\n}\nvoid loop() {\n}\n```";

struct App {
    _dir: tempfile::TempDir,
    provider: Arc<ScriptedProvider>,
    router: Router,
}

fn app_with(policy: LoopPolicy) -> App {
    let dir = tempfile::tempdir().unwrap();
    let provider = Arc::new(ScriptedProvider::default());
    let toolchain = Toolchain::new(ToolchainConfig::mock(dir.path().join("work"))).unwrap();
    let service = SessionService::open(
        Arc::new(Catalog::builtin()),
        provider.clone(),
        Arc::new(toolchain),
        dir.path().join("data"),
        policy,
    )
    .unwrap();
    App {
        _dir: dir,
        provider,
        router: router(Arc::new(service)),
    }
}

fn app() -> App {
    app_with(LoopPolicy::default())
}

impl App {
    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let builder = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => builder
                .header("content-type", "application/json")
                .body(Body::from(b.to_string())),
            None => builder.body(Body::empty()),
        }
        .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }

    async fn create(&self) -> String {
        let manifest =
            json!({ "manifest": { "board": "DeneyapG", "chain": ["S5"], "onboard_used": ["A1"] } });
        let (status, body) = self
            .call(Method::POST, "/api/sessions", Some(manifest))
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session"]["id"].as_str().unwrap().to_owned()
    }

    async fn message(&self, id: &str, text: &str) -> (StatusCode, Value) {
        self.call(
            Method::POST,
            &format!("/api/sessions/{id}/message"),
            Some(json!({ "text": text })),
        )
        .await
    }
}

#[tokio::test]
async fn catalog_and_ports() {
    let app = app();
    let (status, body) = app.call(Method::GET, "/api/catalog", None).await;
    assert_eq!(status, StatusCode::OK);
    let modules = body["catalog"]["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 17);
    let (status, body) = app.call(Method::GET, "/api/ports", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body["ports"],
        json!([{ "port": "MOCK0", "board_hint": "Mock Board" }])
    );
}

#[tokio::test]
async fn create_and_fetch_session() {
    let app = app();
    let id = app.create().await;
    let (status, body) = app
        .call(Method::GET, &format!("/api/sessions/{id}"), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["id"], id.as_str());
    assert_eq!(body["session"]["conversation"], json!([]));
    assert_eq!(body["session"]["sketch_versions"], json!([]));
    assert_eq!(body["session"]["loop_state"]["status"], "idle");
    let (_, body) = app.call(Method::GET, "/api/sessions", None).await;
    assert_eq!(body["sessions"], json!([id]));
}

#[tokio::test]
async fn invalid_manifest_is_422_with_report() {
    let app = app();
    let (status, body) = app
        .call(
            Method::POST,
            "/api/sessions",
            Some(json!({ "manifest": { "board": "S2" } })),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid-manifest");
    assert_eq!(body["error"]["details"]["ok"], false);
    assert_eq!(
        body["error"]["details"]["findings"][0]["code"],
        "board-not-main"
    );
    let (_, body) = app.call(Method::GET, "/api/sessions", None).await;
    assert_eq!(body["sessions"], json!([]));
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let app = app();
    let (status, body) = app
        .call(
            Method::POST,
            "/api/sessions",
            Some(json!({ "board": "DeneyapG" })),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad-request");
    let id = app.create().await;
    let (status, _) = app
        .call(
            Method::POST,
            &format!("/api/sessions/{id}/message"),
            Some(json!({})),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = app.message(&id, "   ").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "empty-instruction");
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    for (method, uri) in [
        (Method::GET, "/api/sessions/nope"),
        (Method::POST, "/api/sessions/nope/compile"),
        (Method::GET, "/api/sessions/nope/knobs"),
    ] {
        let (status, body) = app.call(method, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"]["code"], "not-found");
    }
}

#[tokio::test]
async fn chat_compile_upload_flow() {
    let app = app();
    let id = app.create().await;
    let (status, body) = app
        .call(Method::POST, &format!("/api/sessions/{id}/compile"), None)
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "no-sketch");

    app.provider.push(Ok(GOOD.into()));
    let (status, body) = app.message(&id, "count paw movements").await;
    assert_eq!(status, StatusCode::OK);
    let session = &body["session"];
    assert_eq!(session["loop_state"]["status"], "extracted");
    assert_eq!(session["sketch_versions"].as_array().unwrap().len(), 1);
    assert!(session["sketch_versions"][0]["sketch"]["source"]
        .as_str()
        .unwrap()
        .contains("PAW_TARGET"));

    let (status, body) = app
        .call(Method::POST, &format!("/api/sessions/{id}/compile"), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["loop_state"]["status"], "succeeded");
    assert_eq!(
        body["session"]["loop_state"]["last_result"]["success"],
        true
    );

    let (status, body) = app
        .call(
            Method::POST,
            &format!("/api/sessions/{id}/upload"),
            Some(json!({ "port": "MOCK0" })),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["last_upload"]["success"], true);
    assert_eq!(body["session"]["selected_port"], "MOCK0");
}

#[tokio::test]
async fn compile_upload_with_failing_compile_does_not_upload() {
    let app = app_with(LoopPolicy {
        max_auto_iterations: 3,
        auto_repair: false,
    });
    let id = app.create().await;
    app.provider.push(Ok(BROKEN.into()));
    app.message(&id, "blink").await;
    let (status, body) = app
        .call(
            Method::POST,
            &format!("/api/sessions/{id}/compile-upload"),
            Some(json!({ "port": "MOCK0" })),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["loop_state"]["status"], "awaiting-user");
    assert_eq!(body["session"]["last_upload"], Value::Null);
    let raw = body["session"]["loop_state"]["last_result"]["raw_output"]
        .as_str()
        .unwrap();
    assert!(raw.contains("error: nope"));
}

#[tokio::test]
async fn compile_upload_with_repair_uploads_fixed_sketch() {
    let app = app();
    let id = app.create().await;
    app.provider.push(Ok(BROKEN.into()));
    app.provider.push(Ok(GOOD.into()));
    app.message(&id, "blink").await;
    let (status, body) = app
        .call(
            Method::POST,
            &format!("/api/sessions/{id}/compile-upload"),
            Some(json!({ "port": "MOCK0" })),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["session"]["loop_state"]["status"], "succeeded");
    assert_eq!(body["session"]["loop_state"]["iteration"], 2);
    assert_eq!(body["session"]["last_upload"]["success"], true);
}

#[tokio::test]
async fn knob_endpoints() {
    let app = app();
    let id = app.create().await;
    let (status, _) = app
        .call(Method::GET, &format!("/api/sessions/{id}/knobs"), None)
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    app.provider.push(Ok(GOOD.into()));
    app.message(&id, "count paw movements").await;
    let (status, body) = app
        .call(Method::GET, &format!("/api/sessions/{id}/knobs"), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    let knob = &body["knobs"]["knobs"][0];
    assert_eq!(knob["id"], "PAW_TARGET");
    assert_eq!(knob["value"], 50.0);
    assert_eq!(knob["suggested_min"], 0.0);
    assert_eq!(knob["suggested_max"], 100.0);
    assert_eq!(knob["suggested_step"], 1.0);

    let uri = format!("/api/sessions/{id}/knobs/PAW_TARGET");
    let (status, body) = app
        .call(Method::PATCH, &uri, Some(json!({ "value": 30 })))
        .await;
    assert_eq!(status, StatusCode::OK);
    let versions = body["session"]["sketch_versions"].as_array().unwrap();
    assert_eq!(versions.len(), 2);
    assert!(versions[1]["sketch"]["source"]
        .as_str()
        .unwrap()
        .contains("PAW_TARGET = 30;"));
    assert!(versions[0]["sketch"]["source"]
        .as_str()
        .unwrap()
        .contains("PAW_TARGET = 50;"));
    assert_eq!(body["session"]["loop_state"]["status"], "extracted");
    assert_eq!(body["session"]["last_upload"], Value::Null);

    let (status, body) = app
        .call(Method::PATCH, &uri, Some(json!({ "value": 2.5 })))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "invalid-knob-value");
    let (status, body) = app
        .call(Method::PATCH, &uri, Some(json!({ "value": 1e9 })))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, body) = app
        .call(
            Method::PATCH,
            &format!("/api/sessions/{id}/knobs/NOPE"),
            Some(json!({ "value": 1 })),
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown-knob");
}

#[tokio::test]
async fn provider_timeout_is_504() {
    let app = app();
    let id = app.create().await;
    app.provider.push(Err(ProviderError::Timeout));
    let (status, body) = app.message(&id, "blink").await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(body["error"]["code"], "provider-timeout");
    let (_, body) = app
        .call(Method::GET, &format!("/api/sessions/{id}"), None)
        .await;
    assert_eq!(body["session"]["loop_state"]["status"], "idle");
    assert_eq!(body["session"]["pending_message"], "blink");
}

#[tokio::test]
async fn repeated_rejected_call_gives_identical_response() {
    let app = app();
    let id = app.create().await;
    app.provider.push(Ok(BROKEN.into()));
    app.provider.push(Err(ProviderError::Timeout));
    app.message(&id, "blink").await;
    let (status, _) = app
        .call(Method::POST, &format!("/api/sessions/{id}/compile"), None)
        .await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);

    let (_, before) = app
        .call(Method::GET, &format!("/api/sessions/{id}"), None)
        .await;
    let first = app.message(&id, "again").await;
    let second = app.message(&id, "again").await;
    assert_eq!(first.0, StatusCode::CONFLICT);
    assert_eq!(first, second);
    let (_, after) = app
        .call(Method::GET, &format!("/api/sessions/{id}"), None)
        .await;
    assert_eq!(before, after);
}
