use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use fedstats_api::{router, ApiConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const ID: &str = "com.example.keyboard.discovery";

fn config(devices: u64, min_cohort: u64) -> Value {
    json!({
        "plan": {
            "analysis_id": ID,
            "vocab": ["a", "am", "got", "hello", "i", "is", "the", "to", "world"],
            "max_length": 2,
            "local_epsilon": 1.0,
            "total_epsilon": 8.0,
            "total_delta": 2e-6,
            "min_cohort": min_cohort
        },
        "fleet": { "devices": devices, "seed": 7 }
    })
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn wait_round(app: &Router, token: &str) -> Value {
    for _ in 0..600 {
        let (s, v) = call(app, Method::GET, &format!("/v1/analyses/{ID}/rounds/{token}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] != "pending" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("round {token} never finished");
}

fn walk_keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.push(k.clone());
                walk_keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| walk_keys(x, out)),
        _ => {}
    }
}

fn assert_no_device_data(v: &Value) {
    let mut keys = Vec::new();
    walk_keys(v, &mut keys);
    for bad in ["share_a", "share_b", "coords", "report_bits", "partial_sum", "egress"] {
        assert!(!keys.iter().any(|k| k == bad), "response exposes `{bad}`: {v}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_discovery_over_http() {
    let app = router(ApiConfig::default());
    let (s, v) = call(&app, Method::POST, "/v1/analyses", Some(config(2000, 1000))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["status"], "idle");
    assert_eq!(v["devices"], 2000);

    let (s, v) = call(&app, Method::POST, "/v1/analyses", Some(config(2000, 1000))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "analysis_exists");

    let (s, v) = call(&app, Method::POST, &format!("/v1/analyses/{ID}/rounds"), Some(json!({"kind": "auto_extend"}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let token = v["token"].as_str().unwrap().to_string();
    assert_eq!(v["recipe_id"], format!("{ID}.round1"));

    let round = wait_round(&app, &token).await;
    assert_eq!(round["status"], "published", "{round}");
    assert_eq!(round["result"]["cohort_size"], 2000);
    assert_no_device_data(&round);

    let (s, budget) = call(&app, Method::GET, &format!("/v1/analyses/{ID}/budget"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(budget["plan"]["rounds_published"], 1);
    assert!((budget["plan"]["used_epsilon"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    assert_eq!(budget["fleet"]["devices"], 2000);
    assert_no_device_data(&budget);

    let (s, state) = call(&app, Method::GET, &format!("/v1/analyses/{ID}/state"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(state["discovery"]["round"], 1);
    assert_no_device_data(&state);

    if state["status"] == "idle" {
        let (s, v) = call(&app, Method::POST, &format!("/v1/analyses/{ID}/rounds"), Some(json!({"kind": "auto_extend"}))).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{v}");
        let round = wait_round(&app, v["token"].as_str().unwrap()).await;
        assert_eq!(round["status"], "published", "{round}");
        assert_no_device_data(&round);
    }
    let (s, v) = call(&app, Method::POST, &format!("/v1/analyses/{ID}/rounds"), Some(json!({"kind": "auto_extend"}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    assert_eq!(v["error"], "plan_exceeded");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn small_fleet_is_gated_without_values() {
    let app = router(ApiConfig::default());
    let (s, _) = call(&app, Method::POST, "/v1/analyses", Some(config(50, 1000))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, v) = call(&app, Method::POST, &format!("/v1/analyses/{ID}/rounds"), Some(json!({"kind": "auto_extend"}))).await;
    let round = wait_round(&app, v["token"].as_str().unwrap()).await;
    assert_eq!(round, json!({"status": "gated", "min_cohort": 1000, "detail": "insufficient"}));
    let (_, state) = call(&app, Method::GET, &format!("/v1/analyses/{ID}/state"), None).await;
    assert_eq!(state["status"], "gated");
}

#[tokio::test]
async fn malformed_bodies_get_machine_readable_errors() {
    let app = router(ApiConfig::default());
    let (s, v) = call(&app, Method::POST, "/v1/analyses", Some(json!({"plan": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "malformed_request");
    assert!(v["detail"].is_string());

    let (s, v) = call(&app, Method::GET, "/v1/analyses/nope/budget", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_analysis");

    let (s, _) = call(&app, Method::POST, "/v1/analyses", Some(config(20, 10))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = call(
        &app,
        Method::POST,
        &format!("/v1/analyses/{ID}/rounds"),
        Some(json!({"kind": "recipe", "recipe": {"recipe_id": 3}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "malformed_recipe");

    let (s, v) = call(&app, Method::POST, &format!("/v1/analyses/{ID}/rounds"), Some(json!({"kind": "guess"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "malformed_request");

    let (s, v) = call(&app, Method::GET, &format!("/v1/analyses/{ID}/rounds/round-9"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_round");
}

#[tokio::test]
async fn plans_over_service_limits_are_refused() {
    let app = router(ApiConfig {
        max_total_epsilon: 1.0,
        ..ApiConfig::default()
    });
    let (s, v) = call(&app, Method::POST, "/v1/analyses", Some(config(20, 10))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["error"], "plan_exceeds_limits");

    let app = router(ApiConfig {
        max_devices: 10,
        ..ApiConfig::default()
    });
    let (s, v) = call(&app, Method::POST, "/v1/analyses", Some(config(20, 10))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "fleet_too_large");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn custom_recipes_are_checked_against_the_query_class_and_plan() {
    let app = router(ApiConfig::default());
    call(&app, Method::POST, "/v1/analyses", Some(config(20, 10))).await;
    let recipe = |field: &str, eps: f64| {
        json!({
            "recipe_id": format!("{ID}.custom"),
            "version": 1,
            "analysis_id": ID,
            "query": { "stream": "keyboard", "select": [field] },
            "budgets": { "local_epsilon": 1.0, "aggregate_epsilon": eps, "delta": 1e-6, "min_cohort": 10 },
            "data_content_type": { "features": [
                { "kind": "prefix_tree", "field": field, "prefixes": [""], "vocab": ["hello", "i"] }
            ] }
        })
    };
    let uri = format!("/v1/analyses/{ID}/rounds");
    let (s, v) = call(&app, Method::POST, &uri, Some(json!({"kind": "recipe", "recipe": recipe("ngram", 100.0)}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    assert_eq!(v["error"], "plan_exceeded");

    let (s, v) = call(&app, Method::POST, &uri, Some(json!({"kind": "recipe", "recipe": recipe("contacts", 1.0)}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    assert_ne!(v["error"], "plan_exceeded");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let app = router(ApiConfig {
        token: Some("s3cret".into()),
        ..ApiConfig::default()
    });
    let (s, v) = call(&app, Method::GET, "/v1/analyses/x/state", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "unauthorized");
    let (s, _) = call_with(&app, Method::GET, "/v1/analyses/x/state", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = call_with(&app, Method::GET, "/v1/analyses/x/state", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_analysis");
}
