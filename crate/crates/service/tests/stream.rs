mod common;

use std::time::Duration;

use axum::http::Method;
use common::{app, call, create};
use futures_util::StreamExt;
use graspcue_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn serve(state: &AppState) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

async fn subscribe(addr: std::net::SocketAddr, id: &str) -> Socket {
    let (socket, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/stream")).await.unwrap();
    socket
}

/// Next JSON event, or `None` if nothing arrives within `wait`.
async fn next(socket: &mut Socket, wait: Duration) -> Option<Value> {
    loop {
        match tokio::time::timeout(wait, socket.next()).await {
            Err(_) => return None,
            Ok(None) => return None,
            Ok(Some(msg)) => match msg.unwrap() {
                Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
                Message::Close(_) => return None,
                _ => {}
            },
        }
    }
}

const SHORT: Duration = Duration::from_millis(300);
const LONG: Duration = Duration::from_secs(20);

#[tokio::test]
async fn late_subscribers_get_the_latest_state_then_each_delta() {
    let (app, state) = app(ServiceConfig::default());
    let addr = serve(&state).await;
    let s = create(&app, "planar-halfcircle").await;
    let id = s["session"].as_str().unwrap();
    call(&app, Method::POST, &format!("/sessions/{id}/pose-delta"), Some(json!({ "delta": [0.01, 0, 0, 0, 0, 0] }))).await;

    let mut ws = subscribe(addr, id).await;
    let first = next(&mut ws, LONG).await.unwrap();
    assert_eq!(first["type"], "state");
    assert_eq!(first["revision"], 2);

    let (_, reply) = call(&app, Method::POST, &format!("/sessions/{id}/pose-delta"), Some(json!({ "delta": [0, 0.01, 0, 0, 0, 0] }))).await;
    let event = next(&mut ws, LONG).await.unwrap();
    assert_eq!(event["revision"], 3);
    assert_eq!(event["pose"], reply["pose"]);
    assert_eq!(event["evaluation"], reply["evaluation"]);
    assert!(next(&mut ws, SHORT).await.is_none(), "one delta, one event");
}

#[tokio::test]
async fn streamed_descent_is_monotone_and_gapless_for_every_subscriber() {
    let (app, state) = app(ServiceConfig { tick_hz: 200.0, ..Default::default() });
    let addr = serve(&state).await;
    let s = create(&app, "planar-line").await;
    let id = s["session"].as_str().unwrap();
    let mut a = subscribe(addr, id).await;
    let mut b = subscribe(addr, id).await;
    assert_eq!(next(&mut a, LONG).await.unwrap()["revision"], 1);
    assert_eq!(next(&mut b, LONG).await.unwrap()["revision"], 1);

    let (_, ack) = call(&app, Method::POST, &format!("/sessions/{id}/descent"), Some(json!({ "on": true, "max_steps": 12 }))).await;
    assert_eq!(ack["status"], "started");

    let collect = |mut ws: Socket| async move {
        let mut events = vec![];
        while let Some(e) = next(&mut ws, LONG).await {
            let done = e["descent"]["running"] == false;
            events.push(e);
            if done {
                break;
            }
        }
        events
    };
    let (ea, eb) = tokio::join!(collect(a), collect(b));
    assert_eq!(ea, eb);
    // start event, twelve steps, then the stop at the step limit
    assert_eq!(ea.len(), 14);
    for (k, e) in ea.iter().enumerate() {
        assert_eq!(e["revision"], 2 + k as u64);
    }
    let hs: Vec<f64> = ea.iter().map(|e| e["evaluation"]["H"].as_f64().unwrap()).collect();
    assert!(hs.windows(2).all(|w| w[1] <= w[0]), "{hs:?}");
    assert!(hs[hs.len() - 1] < hs[0]);
    assert_eq!(ea.last().unwrap()["descent"]["termination"], "step-limit");
    assert_eq!(ea.last().unwrap()["descent"]["steps"], 12);
}

#[tokio::test]
async fn stopping_ends_the_automatic_events() {
    let (app, state) = app(ServiceConfig { tick_hz: 50.0, ..Default::default() });
    let addr = serve(&state).await;
    let s = create(&app, "traj2").await;
    let id = s["session"].as_str().unwrap();
    let mut ws = subscribe(addr, id).await;
    next(&mut ws, LONG).await.unwrap();

    let url = format!("/sessions/{id}/descent");
    call(&app, Method::POST, &url, Some(json!({ "on": true }))).await;
    tokio::time::sleep(Duration::from_millis(150)).await;
    let (_, ack) = call(&app, Method::POST, &url, Some(json!({ "on": false }))).await;
    assert_eq!(ack["status"], "stopped");
    let r = ack["revision"].as_u64().unwrap();

    let mut last = 0;
    while let Some(e) = next(&mut ws, SHORT).await {
        let rev = e["revision"].as_u64().unwrap();
        assert!(rev > last);
        last = rev;
    }
    assert_eq!(last, r, "nothing after the stop");
}

#[tokio::test]
async fn deltas_during_descent_are_applied_between_steps() {
    let (app, state) = app(ServiceConfig { tick_hz: 20.0, ..Default::default() });
    let addr = serve(&state).await;
    let s = create(&app, "planar-line").await;
    let id = s["session"].as_str().unwrap();
    let mut ws = subscribe(addr, id).await;
    next(&mut ws, LONG).await.unwrap();
    call(&app, Method::POST, &format!("/sessions/{id}/descent"), Some(json!({ "on": true, "max_steps": 1000 }))).await;
    tokio::time::sleep(Duration::from_millis(120)).await;

    let (_, reply) = call(&app, Method::POST, &format!("/sessions/{id}/pose-delta"), Some(json!({ "delta": [0, 0.02, 0, 0, 0, 0] }))).await;
    assert_eq!(reply["descent"]["running"], true);
    let r = reply["revision"].as_u64().unwrap();
    let mut seen = None;
    while let Some(e) = next(&mut ws, LONG).await {
        if e["revision"].as_u64().unwrap() == r {
            seen = Some(e);
            break;
        }
    }
    assert_eq!(seen.unwrap()["pose"], reply["pose"]);
    let after = next(&mut ws, LONG).await.unwrap();
    assert_eq!(after["revision"].as_u64().unwrap(), r + 1);
    assert_ne!(after["pose"], reply["pose"], "the descent resumed from the displaced pose");
}

#[tokio::test]
async fn closed_sessions_end_the_stream() {
    let (app, state) = app(ServiceConfig::default());
    let addr = serve(&state).await;
    let s = create(&app, "planar-line").await;
    let id = s["session"].as_str().unwrap();
    let mut ws = subscribe(addr, id).await;
    next(&mut ws, LONG).await.unwrap();
    call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    let end = next(&mut ws, LONG).await.unwrap();
    assert_eq!(end, json!({ "type": "closed", "reason": "session closed" }));

    let err = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/stream")).await;
    assert!(err.is_err(), "unknown sessions refuse the upgrade");
}
