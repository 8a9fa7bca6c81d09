//! Drives the HTTP API in-process through the console's loop.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use testgenie_core::exec_orchestrator::{ExecOrchestrator, RunnerConfig};
use testgenie_core::llm_gateway::{HashingEmbedder, LlmGateway, ScriptedProvider, ScriptedReply};
use testgenie_core::output_parser::render_output;
use testgenie_core::session::{SessionService, SessionStore, SpecRegistry};
use testgenie_core::spec_ingest::{ApiSpecDoc, TokenizerHandle};
use testgenie_service::{parse_ks, router};

// Reports one passing and one failing test for any script.
const FAKE_RUNNER: &str = r#"
import json
print(json.dumps({"numTotalTests": 2, "numPassedTests": 1, "numFailedTests": 1,
                  "testResults": [{"message": "expected 200, received 404"}]}))
raise SystemExit(1)
"#;

const CODE: &str = "describe('cats', () => { test('fact', () => {}); });";

fn reply(req: &str) -> ScriptedReply {
    ScriptedReply::text(render_output(req, "GET /fact", &format!("```typescript\n{CODE}\n```")))
}

fn app(dir: &std::path::Path, static_dir: Option<std::path::PathBuf>) -> Router {
    let sandbox = dir.join("sandbox");
    std::fs::create_dir_all(&sandbox).unwrap();
    std::fs::write(sandbox.join(".env.allowlist"), "CATFACT_BASE_ENDPOINT: base url of the cat facts API\n").unwrap();
    std::fs::write(sandbox.join("runner.py"), FAKE_RUNNER).unwrap();
    let tok = TokenizerHandle::approximate();
    let mut specs = SpecRegistry::new();
    specs.insert(
        ApiSpecDoc::from_value(
            "catfact",
            "mem",
            json!({"openapi": "3.0.0", "paths": {"/fact": {"get": {"summary": "Get a random fact"}}}}),
        ),
        &tok,
    );
    let provider = Arc::new(ScriptedProvider::new(vec![
        reply("random cat fact"),
        reply("random cat fact, checking the length field"),
    ]));
    let runner = RunnerConfig {
        program: "python3".into(),
        args: vec!["runner.py".into(), "{file}".into()],
        timeout_seconds: 30.0,
        ..RunnerConfig::default()
    };
    let service = SessionService::new(
        SessionStore::new(dir.join("state")),
        specs,
        LlmGateway::new(provider, tok),
        Arc::new(HashingEmbedder::new(16)),
        ExecOrchestrator::new(&sandbox, runner),
    );
    router(Arc::new(service), static_dir)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    use tower::ServiceExt;
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn new_session() -> Value {
    json!({"spec": "catfact", "requirement": "As a user I want a random cat fact", "model": "gpt-4-turbo"})
}

#[tokio::test(flavor = "multi_thread")]
async fn console_loop_persists_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (st, specs) = call(&app, "GET", "/api/specs", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(specs[0]["name"], "catfact");

    let (st, s) = call(&app, "POST", "/api/sessions", Some(new_session())).await;
    assert_eq!(st, StatusCode::CREATED, "{s}");
    assert_eq!(s["mode"], "Full");
    let id = s["id"].as_str().unwrap().to_string();

    let (st, run) = call(&app, "POST", &format!("/api/sessions/{id}/generate"), None).await;
    assert_eq!(st, StatusCode::OK, "{run}");
    assert_eq!(run["attempt_no"], 1);
    assert!(run["generation"]["code"].as_str().unwrap().contains("describe('cats'"));

    let (st, ex) = call(&app, "POST", &format!("/api/sessions/{id}/execute"), Some(json!({"attempt": 1}))).await;
    assert_eq!(st, StatusCode::OK, "{ex}");
    assert_eq!(ex["run"]["report"]["outcome"], "RUN");
    assert_eq!(ex["run"]["report"]["failed"], 1);

    // A failing unlabelled run is pending until triaged.
    let (_, m) = call(&app, "GET", "/api/metrics?k=1", None).await;
    assert_eq!(m["pending_triage"], 1);

    let (st, ann) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/annotate"),
        Some(json!({"attempt": 1, "label": "Defect", "prompt_level": "L2"})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{ann}");
    assert_eq!(ann["label"]["kind"], "Defect");

    let (st, r) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/refactor"),
        Some(json!({"instruction": "also check the length field"})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["attempt_no"], 2);
    assert_eq!(r["kind"], "refactor");

    let (st, s) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    let runs = s["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["label"]["kind"], "Defect");
    assert_eq!(runs[0]["prompt_level"], "L2");

    let (st, m) = call(&app, "GET", "/api/metrics?k=1", None).await;
    assert_eq!(st, StatusCode::OK, "{m}");
    // Only the unexecuted refactor is still pending.
    assert_eq!(m["pending_triage"], 1);
    assert_eq!(m["totals"]["valid_runs"], 1);
    assert!(m["table"].as_str().unwrap().contains("valid@1"));
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_are_json_with_status() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (st, e) = call(&app, "GET", "/api/sessions/missing", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(e["error"].is_string());

    let mut bad = new_session();
    bad["spec"] = json!("nope");
    let (st, e) = call(&app, "POST", "/api/sessions", Some(bad)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(e["error"].as_str().unwrap().contains("nope"));

    let (st, e) = call(&app, "POST", "/api/sessions", Some(json!({"spec": "catfact"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(e["error"].is_string());

    let (_, s) = call(&app, "POST", "/api/sessions", Some(new_session())).await;
    let id = s["id"].as_str().unwrap();
    let (st, e) = call(&app, "POST", &format!("/api/sessions/{id}/refactor"), None).await;
    assert_eq!(st, StatusCode::CONFLICT, "{e}");

    let (st, _) = call(&app, "POST", &format!("/api/sessions/{id}/execute"), Some(json!({"attempt": 4}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, e) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/annotate"),
        Some(json!({"attempt": 1, "label": "Syntax", "semantic_sub": "Hallucination", "prompt_level": "L1"})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{e}");

    let (st, e) = call(&app, "GET", "/api/metrics?k=0", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(e["error"].as_str().unwrap().contains("invalid k"));
}

#[tokio::test(flavor = "multi_thread")]
async fn static_console_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let web = dir.path().join("web");
    std::fs::create_dir_all(&web).unwrap();
    std::fs::write(web.join("index.html"), "<html>console</html>").unwrap();
    let app = app(dir.path(), Some(web));
    let (st, body) = call(&app, "GET", "/", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, "<html>console</html>");
    let (st, body) = call(&app, "GET", "/sessions/abc", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, "<html>console</html>");
    let (st, _) = call(&app, "GET", "/api/specs", None).await;
    assert_eq!(st, StatusCode::OK);
}

#[test]
fn ks_parse() {
    assert_eq!(parse_ks("1,2,3").unwrap(), [1, 2, 3]);
    assert_eq!(parse_ks(" 5 ").unwrap(), [5]);
    assert!(parse_ks("").is_err());
    assert!(parse_ks("1,x").is_err());
}
