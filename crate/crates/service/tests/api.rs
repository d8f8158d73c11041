use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use narrative_core::arc::{compute_arc_of, NarrativeArc};
use narrative_core::conversation::{RetrievalIndex, RetrievalModel};
use narrative_core::corpus::Utterance;
use narrative_core::synth::reveal_conceal_pool;
use narrative_core::universe::{train, NaiveBayesModel, UniverseModel, DEFAULT_SMOOTHING};
use narrative_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn models() -> (Arc<NaiveBayesModel>, Arc<RetrievalModel>, Vec<Utterance>) {
    let p = reveal_conceal_pool(20, 20, 40, 3).unwrap();
    let nb = train(&p.training, &p.label_map, DEFAULT_SMOOTHING).unwrap();
    let pool = p.pool();
    let conv = RetrievalModel::new(RetrievalIndex::from_pool(pool.clone()).unwrap(), 8);
    (Arc::new(nb), Arc::new(conv), pool)
}

fn state(config: ServiceConfig) -> (Arc<AppState>, Arc<NaiveBayesModel>, Vec<Utterance>) {
    let (nb, conv, pool) = models();
    (AppState::new(nb.clone(), conv, config), nb, pool)
}

fn app() -> (Router, Arc<NaiveBayesModel>, Vec<Utterance>) {
    let (s, nb, pool) = state(ServiceConfig::default());
    (router(s), nb, pool)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn create(app: &Router, body: Value) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_owned()
}

async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/sessions/{id}/utterance"),
        Some(json!({ "text": text })),
    )
    .await
}

#[tokio::test]
async fn health_reports_ok() {
    let (app, _, _) = app();
    let (s, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["universes"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn mode_defaults_and_validation() {
    let (app, _, _) = app();
    for (mode, alpha) in [("neutral", 0.0), ("reveal", 20.0), ("conceal", -25.0)] {
        let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "mode": mode }))).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_eq!(v["config"]["alpha"].as_f64().unwrap(), alpha);
        assert_eq!(v["config"]["turn_limit"], 5);
    }
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "alpha": -3.0 }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["config"]["mode"], "conceal");
    // neutral mode forces M = 1
    let (_, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "mode": "neutral" })),
    )
    .await;
    assert_eq!(v["config"]["max_score"].as_f64().unwrap(), 1.0);

    for bad in [
        json!({ "alpha": 5.0, "mode": "conceal" }),
        json!({ "alpha": 0.0, "mode": "reveal" }),
        json!({ "mode": "neutral", "alpha": 1.0 }),
        json!({}),
        json!({ "mode": "sideways" }),
        json!({ "mode": "reveal", "colour": "red" }),
        json!({ "mode": "reveal", "turn_limit": 0 }),
    ] {
        let (s, v) = call(&app, "POST", "/sessions", Some(bad.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        assert!(v["code"].is_string() && v["message"].is_string(), "{v}");
    }
    let (_, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "alpha": 5.0, "mode": "conceal" })),
    )
    .await;
    assert_eq!(v["code"], "mode_alpha_mismatch");
}

#[tokio::test]
async fn fresh_session_arc_is_one_uniform_point() {
    let (app, _, _) = app();
    let id = create(&app, json!({ "mode": "reveal" })).await;
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}/arc"), None).await;
    assert_eq!(s, StatusCode::OK);
    let arc = NarrativeArc::from_json(&v.to_string()).unwrap();
    assert_eq!(arc.len(), 1);
    assert_eq!(arc.last().probs.probs(), &[0.5, 0.5]);
}

#[tokio::test]
async fn turns_grow_the_arc_and_stop_at_the_limit() {
    let (app, nb, _) = app();
    let id = create(&app, json!({ "mode": "reveal", "seed": 4 })).await;
    for t in 1..=5 {
        let (s, v) = say(&app, &id, &format!("hello number {t}")).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["turn"], t);
        assert_eq!(v["turns_remaining"], 5 - t);
        assert!(v["candidate_diagnostics"].is_null());
        let (_, arc) = call(&app, "GET", &format!("/sessions/{id}/arc"), None).await;
        let arc = NarrativeArc::from_json(&arc.to_string()).unwrap();
        assert_eq!(arc.len(), 2 * t + 1);
        assert_eq!(serde_json::to_value(arc.last()).unwrap(), v["arc_point"]);
    }
    let (s, v) = say(&app, &id, "one more").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "turn_limit_reached");

    // the served arc is the arc of the served transcript
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let lines: Vec<Utterance> = view["transcript"]["lines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| Utterance::new(l["text"].as_str().unwrap()).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    let sources: Vec<&str> = view["transcript"]["lines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["source"].as_str().unwrap())
        .collect();
    assert_eq!(sources, ["human", "generated"].repeat(5));
    let oracle = compute_arc_of(&lines, nb.as_ref()).unwrap();
    let (_, served) = call(&app, "GET", &format!("/sessions/{id}/arc"), None).await;
    let served = NarrativeArc::from_json(&served.to_string()).unwrap();
    for (a, b) in served.points().iter().zip(oracle.points()) {
        for (x, y) in a.probs.probs().iter().zip(b.probs.probs()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.entropy - b.entropy).abs() < 1e-9);
    }
}

#[tokio::test]
async fn errors_for_unknown_sessions_and_empty_text() {
    let (app, _, _) = app();
    let (s, v) = say(&app, "nope", "hi").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "session_not_found");
    let (s, _) = call(&app, "GET", "/sessions/nope/arc", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = create(&app, json!({ "mode": "neutral" })).await;
    for text in ["", "   "] {
        let (s, v) = say(&app, &id, text).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(v["code"], "empty_text");
    }
    let (s, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/utterance"),
        Some(json!({ "text": "x", "y": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // rejected requests leave the session untouched
    let (_, arc) = call(&app, "GET", &format!("/sessions/{id}/arc"), None).await;
    assert_eq!(arc["points"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn same_seed_same_replies() {
    let (app, _, _) = app();
    let mut replies = Vec::new();
    for _ in 0..2 {
        let id = create(
            &app,
            json!({ "mode": "conceal", "seed": 11, "method": "rejection" }),
        )
        .await;
        let mut r = Vec::new();
        for text in ["where are we", "the ship is sinking", "run"] {
            let (_, v) = say(&app, &id, text).await;
            r.push(v["response_text"].as_str().unwrap().to_owned());
        }
        replies.push(r);
    }
    assert_eq!(replies[0], replies[1]);
}

#[tokio::test]
async fn diagnostics_list_the_scored_candidates() {
    let (app, _, _) = app();
    let id = create(&app, json!({ "mode": "reveal", "seed": 1 })).await;
    let (s, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/utterance?diagnostics=true"),
        Some(json!({ "text": "hello" })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let d = &v["candidate_diagnostics"];
    let cands = d["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 32);
    let chosen: Vec<&Value> = cands.iter().filter(|c| c["chosen"] == true).collect();
    assert_eq!(chosen.len(), 1);
    assert_eq!(chosen[0]["text"], v["response_text"]);
    let best = cands
        .iter()
        .map(|c| c["q_tilde"].as_f64().unwrap())
        .fold(f64::MIN, f64::max);
    assert_eq!(chosen[0]["q_tilde"].as_f64().unwrap(), best);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_do_not_interleave() {
    let (state, nb, _) = state(ServiceConfig {
        turn_limit: 30,
        ..Default::default()
    });
    let app = router(state);
    let a = create(&app, json!({ "mode": "reveal", "seed": 1 })).await;
    let b = create(&app, json!({ "mode": "conceal", "seed": 2 })).await;
    let mut tasks = Vec::new();
    for (id, tag) in [(a.clone(), "alpha"), (b.clone(), "bravo")] {
        for _ in 0..3 {
            let app = app.clone();
            let id = id.clone();
            tasks.push(tokio::spawn(async move {
                for i in 0..10 {
                    let (s, _) = say(&app, &id, &format!("{tag} line {i}")).await;
                    assert_eq!(s, StatusCode::OK);
                }
            }));
        }
    }
    for t in tasks {
        t.await.unwrap();
    }
    for (id, tag, other) in [(a, "alpha", "bravo"), (b, "bravo", "alpha")] {
        let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(view["turns"], 30);
        let lines = view["transcript"]["lines"].as_array().unwrap();
        assert_eq!(lines.len(), 60);
        let texts: Vec<Utterance> = lines
            .iter()
            .map(|l| Utterance::new(l["text"].as_str().unwrap()).unwrap())
            .collect();
        for (i, l) in lines.iter().enumerate() {
            let text = l["text"].as_str().unwrap();
            if i % 2 == 0 {
                assert_eq!(l["source"], "human");
                assert!(text.starts_with(tag));
            } else {
                assert_eq!(l["source"], "generated");
            }
            assert!(!text.starts_with(other));
        }
        let oracle = compute_arc_of(&texts, nb.as_ref()).unwrap();
        let (_, served) = call(&app, "GET", &format!("/sessions/{id}/arc"), None).await;
        let served = NarrativeArc::from_json(&served.to_string()).unwrap();
        assert_eq!(served.len(), 61);
        for (x, y) in served.points().iter().zip(oracle.points()) {
            for (p, q) in x.probs.probs().iter().zip(y.probs.probs()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let (app, _, _) = app();
    let req = Request::builder()
        .uri("/healthz")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn sessions_are_saved_on_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    let (state, nb, _) = state(ServiceConfig {
        persist_path: Some(path.clone()),
        ..Default::default()
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(narrative_service::serve(listener, state.clone(), async {
        rx.await.ok();
    }));
    let app = router(state.clone());
    let id = create(&app, json!({ "mode": "reveal", "seed": 5 })).await;
    say(&app, &id, "good morning").await;
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();

    let snap: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(snap["version"], 1);
    let s = &snap["sessions"][0];
    assert_eq!(s["session_id"], id.as_str());
    assert_eq!(s["transcript"]["lines"].as_array().unwrap().len(), 2);
    assert_eq!(
        s["config"]["universes"].as_array().unwrap().len(),
        nb.universe_set().len()
    );
}
