#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use graspcue_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn app(config: ServiceConfig) -> (Router, AppState) {
    let state = AppState::new(config);
    (router(state.clone()), state)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let request = match body {
        Some(v) => request.body(Body::from(v.to_string())),
        None => request.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn create(app: &Router, scenario: &str) -> Value {
    let (status, state) = call(app, Method::POST, "/sessions", Some(serde_json::json!({ "scenario": scenario }))).await;
    assert_eq!(status, StatusCode::CREATED, "{state}");
    state
}
