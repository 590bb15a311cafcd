use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use duplexkit_core::rating::{Origin, PairManifestEntry, PairSet, Position, RatingStore};
use duplexkit_ratesvc::{router, AppState, NextPair};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn pairs(n: u32) -> PairSet {
    let entries: Vec<_> = (1..=n)
        .map(|i| PairManifestEntry { pair_id: i, human_audio: format!("h{i}.wav"), model_audio: format!("m{i}.wav") })
        .collect();
    PairSet::new(&entries, 11).unwrap()
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/api/ratings").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn rating(pair_id: u32, rater: &str, preference: &str) -> Value {
    json!({
        "pair_id": pair_id, "rater_id": rater,
        "naturalness_a": 5, "naturalness_b": 3, "clarity_a": 4, "clarity_b": 4,
        "preference": preference,
        "rubrics": {"human_like": true, "appropriate": true, "complete": false}
    })
}

#[tokio::test]
async fn rating_flow() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("h1.wav"), b"RIFFdata").unwrap();
    let state = Arc::new(AppState::new(pairs(2), RatingStore::in_memory(), dir.path()));
    let app = router(state.clone());

    let (s, body) = call(&app, get("/api/pairs/next?rater=r1")).await;
    assert_eq!(s, StatusCode::OK);
    let next: NextPair = serde_json::from_slice(&body).unwrap();
    assert_eq!(next.pair.as_ref().unwrap().pair_id, 1);
    let text = String::from_utf8(body).unwrap();
    assert!(!text.contains("HUMAN") && !text.contains("origin"));

    assert_eq!(call(&app, post(rating(1, "r1", "A"))).await.0, StatusCode::CREATED);
    assert_eq!(call(&app, post(rating(1, "r1", "A"))).await.0, StatusCode::CONFLICT);
    let mut bad = rating(2, "r1", "B");
    bad["clarity_b"] = json!(6);
    assert_eq!(call(&app, post(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, post(rating(9, "r1", "TIE"))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, post(rating(2, "r1", "TIE"))).await.0, StatusCode::CREATED);

    let (_, body) = call(&app, get("/api/pairs/next?rater=r1")).await;
    let next: NextPair = serde_json::from_slice(&body).unwrap();
    assert!(next.done && next.pair.is_none());
    assert_eq!(next.completed, 2);
    assert_eq!(call(&app, get("/api/pairs/next?rater=")).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, body) = call(&app, get("/api/summary")).await;
    assert_eq!(s, StatusCode::OK);
    let summary: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(summary["n_ratings"], 2);
    assert_eq!(summary["preference_tie_pct"], 50.0);

    let (s, body) = call(&app, get("/audio/h1.wav")).await;
    assert_eq!((s, body.as_slice()), (StatusCode::OK, &b"RIFFdata"[..]));
    assert_eq!(call(&app, get("/audio/m1.wav")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/audio/..%2Fsecret")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn human_preference_survives_blinding_over_http() {
    let set = pairs(30);
    let human_pos: Vec<Position> = set.iter().map(|p| p.position_of(Origin::Human)).collect();
    let app = router(Arc::new(AppState::new(set, RatingStore::in_memory(), ".")));
    for (i, pos) in human_pos.iter().enumerate() {
        let pref = if *pos == Position::A { "A" } else { "B" };
        assert_eq!(call(&app, post(rating(i as u32 + 1, "r", pref))).await.0, StatusCode::CREATED);
    }
    let (_, body) = call(&app, get("/api/summary")).await;
    let summary: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(summary["preference_human_pct"], 100.0);
}

#[tokio::test]
async fn restart_preserves_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.jsonl");
    let first = {
        let app = router(Arc::new(AppState::new(pairs(5), RatingStore::open(&path).unwrap(), ".")));
        for (i, p) in ["A", "B", "TIE", "A"].iter().enumerate() {
            call(&app, post(rating(i as u32 + 1, "r", p))).await;
        }
        call(&app, get("/api/summary")).await.1
    };
    let app = router(Arc::new(AppState::new(pairs(5), RatingStore::open(&path).unwrap(), ".")));
    assert_eq!(call(&app, get("/api/summary")).await.1, first);
}
