use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::json;
use tower::ServiceExt;

use filtrank::annotation::{AnnotationStore, Decision, HitView, Progress, RejectReason, StoreConfig, Submission};
use filtrank::dataset::{pair_design, pair_manifest, score_log, synthesize_corpus, Corpus, Verdict};
use filtrank::evaluation::rank_filters;
use filtrank::imagecore::decode_png;
use filtrank::models::{build_model, Arch, Mode, Variant};
use filtrank::rng::Rng;
use filtrank_service::{router, AppState, ErrorBody, Recommendation};

fn corpus() -> Corpus {
    synthesize_corpus(1, 72, 5).unwrap()
}

fn app_with(corpus: Corpus, model: bool) -> (Router, Arc<AppState>) {
    let pairs = pair_manifest(&corpus.refs, &pair_design());
    let cfg = StoreConfig {
        sequence_clock: true,
        seed: 1,
        ..StoreConfig::default()
    };
    let model = model.then(|| build_model(Arch::desk(Variant::RapidReduced), Mode::PairComp, &mut Rng::new(4)).unwrap());
    let state = Arc::new(AppState::new(AnnotationStore::new(pairs, cfg), corpus, model));
    (router(state.clone()), state)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> (StatusCode, T) {
    let (s, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&b))))
}

async fn post<T: DeserializeOwned>(app: &Router, sub: &Submission) -> (StatusCode, T) {
    let req = Request::post(format!("/api/hit/{}", sub.hit_id))
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(sub).unwrap()))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

/// Higher filter index wins; consistent under swapping and never `equal`.
fn honest(view: &HitView, who: &str) -> Submission {
    Submission {
        hit_id: view.hit_id.clone(),
        answers: view
            .questions
            .iter()
            .map(|q| Some(if q.left > q.right { Verdict::Left } else { Verdict::Right }))
            .collect(),
        math_answer: Some(view.math.answer()),
        annotator_id: who.into(),
    }
}

#[tokio::test]
async fn honest_annotator_drains_the_queue_over_http() {
    let (app, state) = app_with(corpus(), false);
    let (_, start): (_, Progress) = get(&app, "/api/progress").await;
    assert_eq!(start.total_pairs, 8 * 33);
    assert_eq!(start.pending, 8 * 33);
    let mut hits = 0;
    loop {
        let (s, body) = send(&app, Request::get("/api/hit?annotator=a").body(Body::empty()).unwrap()).await;
        if s == StatusCode::CONFLICT {
            let err: ErrorBody = serde_json::from_slice(&body).unwrap();
            assert_eq!(err.error, "InsufficientPendingPairs");
            break;
        }
        assert_eq!(s, StatusCode::OK);
        let view: HitView = serde_json::from_slice(&body).unwrap();
        assert_eq!(view.questions.len(), 10);
        let before: Progress = get(&app, "/api/progress").await.1;
        let (s, d): (_, Decision) = post(&app, &honest(&view, "a")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(d, Decision::Accept);
        let after: Progress = get(&app, "/api/progress").await.1;
        assert_eq!(after.accepted, before.accepted + 1);
        assert!(after.labelled > before.labelled);
        hits += 1;
        assert!(hits < 100);
    }
    let end: Progress = get(&app, "/api/progress").await.1;
    assert_eq!((end.pending, end.checked_out, end.labelled), (0, 0, 8 * 33));
    assert_eq!(hits, (8 * 33usize).div_ceil(9));

    let design = pair_design();
    state.with_store(|s| {
        let mut appearances: BTreeMap<(String, String), usize> = BTreeMap::new();
        for l in s.labels() {
            for f in [l.left, l.right] {
                *appearances.entry((l.ref_id.clone(), f.name().into())).or_default() += 1;
            }
        }
        assert_eq!(appearances.len(), 8 * 22);
        assert!(appearances.values().all(|&n| n == 3));
        assert_eq!(s.scores(&design).unwrap(), score_log(s.labels(), &design).unwrap());
        assert_eq!(s.scores(&design).unwrap().len(), 8);
    });
}

#[tokio::test]
async fn contradictory_duplicate_is_rejected_and_requeued() {
    let (app, _) = app_with(corpus(), false);
    let (_, view): (_, HitView) = get(&app, "/api/hit?annotator=b").await;
    let hits_pairs = |v: &HitView| {
        let mut idx = BTreeMap::new();
        for (i, q) in v.questions.iter().enumerate() {
            let key = (q.ref_id.clone(), q.left.min(q.right), q.left.max(q.right));
            idx.entry(key).or_insert_with(Vec::new).push(i);
        }
        idx
    };
    // Always pick the left image: the swapped duplicate then disagrees.
    let mut sub = honest(&view, "b");
    sub.answers = vec![Some(Verdict::Left); 10];
    assert!(hits_pairs(&view).values().any(|v| v.len() == 2));
    let before: Progress = get(&app, "/api/progress").await.1;
    let (s, d): (_, Decision) = post(&app, &sub).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d, Decision::Reject(vec![RejectReason::DuplicateInconsistent]));
    let after: Progress = get(&app, "/api/progress").await.1;
    assert_eq!(after.pending, before.pending + 9);
    assert_eq!(after.labelled, 0);
    assert_eq!(after.rejected, 1);

    let (s, err): (_, ErrorBody) = post(&app, &sub).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(err.error, "AlreadyClosed");
}

#[tokio::test]
async fn quality_checks_over_http() {
    let (app, _) = app_with(corpus(), false);

    let (_, view): (_, HitView) = get(&app, "/api/hit").await;
    let mut sub = honest(&view, "c");
    let mut equals = 0;
    for a in sub.answers.iter_mut() {
        if equals < 2 {
            *a = Some(Verdict::Equal);
            equals += 1;
        }
    }
    let (_, d): (_, Decision) = post(&app, &sub).await;
    assert!(matches!(&d, Decision::Reject(r) if r.contains(&RejectReason::TooManyEqual)));

    let (_, view): (_, HitView) = get(&app, "/api/hit").await;
    let mut sub = honest(&view, "c");
    sub.math_answer = Some(view.math.answer() + 1);
    let (_, d): (_, Decision) = post(&app, &sub).await;
    assert_eq!(d, Decision::Reject(vec![RejectReason::MathFailed]));

    let (_, view): (_, HitView) = get(&app, "/api/hit").await;
    let mut sub = honest(&view, "c");
    sub.answers[3] = None;
    let (_, d): (_, Decision) = post(&app, &sub).await;
    assert_eq!(d, Decision::Reject(vec![RejectReason::Incomplete]));
}

#[tokio::test]
async fn unknown_and_mismatched_hits() {
    let (app, _) = app_with(corpus(), false);
    let sub = Submission {
        hit_id: "nope".into(),
        answers: vec![Some(Verdict::Left); 10],
        math_answer: Some(2),
        annotator_id: "d".into(),
    };
    let (s, err): (_, ErrorBody) = post(&app, &sub).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(err.error, "UnknownHit");

    let req = Request::post("/api/hit/other")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(&sub).unwrap()))
        .unwrap();
    let (s, _) = send(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let req = Request::post("/api/hit/x")
        .header("content-type", "application/json")
        .body(Body::from(json!({"hit_id": "x"}).to_string()))
        .unwrap();
    let (s, _) = send(&app, req).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn hit_view_hides_the_duplicate_mapping() {
    let (app, _) = app_with(corpus(), false);
    let (s, body) = send(&app, Request::get("/api/hit").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let raw: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let text = raw.to_string();
    assert!(!text.contains("duplicate"));
    assert!(!text.contains("original"));
    let q = &raw["questions"][0];
    let img = q["left_image"].as_str().unwrap();
    assert!(img.starts_with(q["ref_id"].as_str().unwrap()));
}

#[tokio::test]
async fn images_are_filtered_pngs() {
    let c = corpus();
    let ref_id = c.refs[0].id.clone();
    let (app, _) = app_with(c.clone(), false);
    let (s, body) = send(
        &app,
        Request::get(format!("/api/image/{ref_id}.Inkwell")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let img = decode_png(&body).unwrap();
    assert_eq!((img.width(), img.height()), (72, 72));
    assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));

    for uri in [
        format!("/api/image/{ref_id}.NoSuchFilter"),
        "/api/image/missing_0000.Inkwell".to_string(),
        "/api/image/nodot".to_string(),
    ] {
        let (s, _) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn recommend_returns_model_order() {
    let c = corpus();
    let ref_id = c.refs[2].id.clone();
    let (app, state) = app_with(c.clone(), true);
    let (s, rec): (_, Recommendation) = get(&app, &format!("/api/recommend?ref={ref_id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec.entries.len(), 5);

    let model = build_model(Arch::desk(Variant::RapidReduced), Mode::PairComp, &mut Rng::new(4)).unwrap();
    let expected = rank_filters(&model, &ref_id, c.image(&ref_id).unwrap(), Mode::PairComp).unwrap();
    for (i, e) in rec.entries.iter().enumerate() {
        assert_eq!(e.rank, i + 1);
        assert_eq!(e.filter, expected.entries[i].0.name());
        assert_eq!(e.score, expected.entries[i].1);
        assert_eq!(e.image, format!("{ref_id}.{}", e.filter));
    }
    drop(state);

    let (_, one): (_, Recommendation) = get(&app, &format!("/api/recommend?ref={ref_id}&k=1")).await;
    assert_eq!(one.entries.len(), 1);
    assert_eq!(one.entries[0].filter, rec.entries[0].filter);

    let (s, err): (_, ErrorBody) = get(&app, &format!("/api/recommend?ref={ref_id}&k=0")).await;
    assert_eq!((s, err.error.as_str()), (StatusCode::BAD_REQUEST, "BadRequest"));
    let (s, _): (_, ErrorBody) = get(&app, "/api/recommend?ref=nobody&k=3").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn recommend_without_model() {
    let (app, _) = app_with(corpus(), false);
    let (s, err): (_, ErrorBody) = get(&app, "/api/recommend?ref=animal_0000&k=3").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err.error, "NoModelLoaded");
}

#[tokio::test]
async fn persisted_store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let pairs = pair_manifest(&c.refs, &pair_design());
    let cfg = StoreConfig {
        sequence_clock: true,
        seed: 2,
        ..StoreConfig::default()
    };
    let state = Arc::new(AppState::new(
        AnnotationStore::open(dir.path(), pairs.clone(), cfg.clone()).unwrap(),
        c.clone(),
        None,
    ));
    let app = router(state);
    for _ in 0..3 {
        let (_, view): (_, HitView) = get(&app, "/api/hit?annotator=e").await;
        let (_, d): (_, Decision) = post(&app, &honest(&view, "e")).await;
        assert!(d.accepted());
    }
    // An open HIT at shutdown returns its pairs to the queue.
    let (_, _open): (_, HitView) = get(&app, "/api/hit?annotator=e").await;
    let before: Progress = get(&app, "/api/progress").await.1;
    drop(app);

    let reopened = Arc::new(AppState::new(AnnotationStore::open(dir.path(), pairs, cfg).unwrap(), c, None));
    let app = router(reopened);
    let after: Progress = get(&app, "/api/progress").await.1;
    assert_eq!(after.labelled, before.labelled);
    assert_eq!(after.accepted, 3);
    assert_eq!(after.pending, 8 * 33 - 27);
    assert_eq!(after.open_hits, 0);
}
