#![allow(dead_code)]

use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use fhrctl_core::scenario::{load_or_fit_model, ScenarioConfig};
use fhrctl_core::sysid::StateSpaceModel;

/// Governor model fitted once per test binary.
pub fn model() -> StateSpaceModel {
    static MODEL: OnceLock<StateSpaceModel> = OnceLock::new();
    MODEL
        .get_or_init(|| load_or_fit_model(&ScenarioConfig::default()).expect("model fit"))
        .clone()
}

pub fn config(duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration,
        ..ScenarioConfig::default()
    }
}

/// Config with the governor switched off, for sessions without a model.
pub fn ungoverned(duration: f64) -> ScenarioConfig {
    let mut cfg = config(duration);
    cfg.governor.enabled = false;
    cfg
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, v)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post(app: &Router, body: impl Into<String>) -> (StatusCode, Value) {
    let req = Request::post("/command")
        .header("content-type", "application/json")
        .body(Body::from(body.into()))
        .unwrap();
    call(app, req).await
}
