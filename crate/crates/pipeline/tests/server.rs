mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use medex_core::docmodel::Document;
use medex_core::evalkit::YesNo;
use medex_core::lfkit::LfSet;
use medex_core::promptex::{AnswerKeyTransport, Completion, LlmTransport, PromptTemplate, TransportError};
use medex_core::synthcorpus::{oracle_answer_key, oracle_answers, GroundTruth};
use medex_pipeline::server::{router, serve_on, AppState, JobRecord, JobStatus};
use medex_pipeline::Resources;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(serde_json::to_vec(&body).unwrap())).await
}

async fn put(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::PUT, uri, Some(serde_json::to_vec(&body).unwrap())).await
}

fn app_with(res: Resources, job_workers: usize) -> (Arc<AppState>, Router) {
    let st = AppState::new(res, job_workers, None).unwrap();
    (Arc::clone(&st), router(st))
}

fn oracle_app(truth: &[GroundTruth]) -> (Arc<AppState>, Router) {
    app_with(common::oracle_resources(truth), 2)
}

async fn upload(app: &Router, docs: &[Document]) -> Vec<String> {
    let mut ids = Vec::new();
    for d in docs {
        let (s, v) = call(app, Method::POST, "/documents", Some(d.to_ocr_json())).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        assert_eq!(v["tokens"], json!(d.len()));
        ids.push(v["doc_id"].as_str().unwrap().to_string());
    }
    ids
}

fn yes_no(v: &Value) -> Vec<YesNo> {
    serde_json::from_value(v.clone()).unwrap()
}

fn with_course(seed: u64, n: usize) -> (Vec<Document>, Vec<GroundTruth>) {
    let (docs, truth) = common::corpus(seed, n * 2);
    docs.into_iter()
        .zip(truth)
        .filter(|(_, t)| !t.course_is_empty())
        .take(n)
        .unzip()
}

#[tokio::test]
async fn healthz_answers() {
    let (_, app) = oracle_app(&[]);
    let (s, v) = get(&app, "/healthz").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn single_document_gets_twelve_answers() {
    let (docs, truth) = with_course(21, 1);
    let (_, app) = oracle_app(&truth);
    let ids = upload(&app, &docs).await;
    let (s, job) = post(&app, "/jobs", json!({"doc_ids": ids, "wait": true})).await;
    assert_eq!(s, StatusCode::OK, "{job}");
    let job: JobRecord = serde_json::from_value(job).unwrap();
    assert_eq!(job.status, JobStatus::Done);
    assert_eq!(job.progress, 1.0);
    assert_eq!(job.template_id, "default");

    let (s, r) = get(&app, &format!("/results/{}", ids[0])).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["job_id"], json!(job.job_id));
    assert_eq!(r["answers"]["questions"].as_array().unwrap().len(), 12);
    assert_eq!(yes_no(&r["answers"]["run1"]), oracle_answers(&truth[0]));
    assert_eq!(r["answers"]["disagreements"], json!([]));
    assert!(r["serial"].as_str().unwrap().starts_with("DS-"));
    let text = r["anonymized_text"].as_str().unwrap();
    assert!(text.contains("[REDACTED]"));
    assert!(!text.contains(&truth[0].patient_id));
    assert_eq!(r["fields"]["diagnosis"], json!(truth[0].field("diagnosis").unwrap()));
    assert!(r.get("quarantine").is_none());
}

#[tokio::test]
async fn bulk_job_of_twenty_reaches_done() {
    let (docs, truth) = common::corpus(22, 20);
    let (_, app) = oracle_app(&truth);
    let ids = upload(&app, &docs).await;
    let started = Instant::now();
    let (s, job) = post(&app, "/jobs", json!({"doc_ids": ids})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(job["status"], "QUEUED");
    let id = job["job_id"].as_str().unwrap().to_string();
    let done = loop {
        let (_, j) = get(&app, &format!("/jobs/{id}")).await;
        let j: JobRecord = serde_json::from_value(j).unwrap();
        assert!((0.0..=1.0).contains(&j.progress));
        if matches!(j.status, JobStatus::Done | JobStatus::Failed) {
            break j;
        }
        assert!(started.elapsed() < Duration::from_secs(60), "job stuck");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(done.status, JobStatus::Done, "{:?}", done.error);
    assert_eq!(done.progress, 1.0);
    let report = done.report.unwrap();
    report.check_consistency().unwrap();
    for (d, gt) in ids.iter().zip(&truth) {
        let (s, r) = get(&app, &format!("/results/{d}")).await;
        assert_eq!(s, StatusCode::OK);
        if gt.course_is_empty() {
            assert_eq!(r["quarantine"]["stage"], "features");
            assert_eq!(r["quarantine"]["reason"], "empty course in hospital");
            assert!(r.get("answers").is_none());
            assert!(r["fields"].is_object());
        } else {
            assert_eq!(yes_no(&r["answers"]["run1"]), oracle_answers(gt));
        }
    }

    let (s, m) = get(&app, "/metrics/validation").await;
    assert_eq!(s, StatusCode::OK);
    let answered = truth.iter().filter(|t| !t.course_is_empty()).count();
    assert_eq!(m["n_docs"], json!(answered));
    assert_eq!(m["rows"].as_array().unwrap().len(), 12);
    for row in m["rows"].as_array().unwrap() {
        let n: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| row["counts"][k].as_u64().unwrap()).sum();
        assert_eq!(n, answered as u64);
        assert_eq!(row["counts"]["fp"], 0);
        assert_eq!(row["counts"]["fn"], 0);
    }
    assert!(m["intra_model_kappa"].as_array().unwrap().iter().all(|k| k["kappa"] == 1.0));
}

fn thirteen() -> Value {
    let mut t = PromptTemplate::default();
    t.questions.push("Was the patient transfused?".into());
    serde_json::to_value(&t).unwrap()
}

#[tokio::test]
async fn thirteen_question_template_yields_thirteen_answers() {
    let (docs, truth) = with_course(23, 1);
    let (_, app) = oracle_app(&truth);
    let ids = upload(&app, &docs).await;
    let (s, t) = put(&app, "/templates/long", thirteen()).await;
    assert_eq!(s, StatusCode::OK, "{t}");
    assert_eq!(t["version"], 1);
    let (s, job) = post(&app, "/jobs", json!({"doc_ids": ids, "template_id": "long", "wait": true})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(job["template_version"], 1);
    let (_, r) = get(&app, &format!("/results/{}", ids[0])).await;
    let run1 = yes_no(&r["answers"]["run1"]);
    assert_eq!(run1.len(), 13);
    assert_eq!(&run1[..12], oracle_answers(&truth[0]).as_slice());
    assert_eq!(r["answers"]["questions"].as_array().unwrap().len(), 13);

    // the scorer only takes twelve-question answers
    let (_, m) = get(&app, "/metrics/validation").await;
    assert_eq!(m["n_docs"], 0);
}

#[tokio::test]
async fn planted_divergence_shows_one_disagreement() {
    let (docs, truth) = with_course(24, 1);
    let run1 = oracle_answers(&truth[0]);
    let mut run2 = run1.clone();
    run2[4] = if run2[4].is_yes() { YesNo::No } else { YesNo::Yes };
    let mut key = AnswerKeyTransport::new();
    key.insert_runs(truth[0].doc_id.clone(), run1, run2);
    let (_, app) = app_with(common::resources_with(key, None), 1);
    let ids = upload(&app, &docs).await;
    let (s, _) = post(&app, "/jobs", json!({"doc_ids": ids, "wait": true})).await;
    assert_eq!(s, StatusCode::OK);
    let (_, r) = get(&app, &format!("/results/{}", ids[0])).await;
    assert_eq!(r["answers"]["disagreements"], json!([5]));
    let agree: Vec<bool> = serde_json::from_value(r["answers"]["agreement"].clone()).unwrap();
    assert_eq!(agree.iter().filter(|a| !**a).count(), 1);
}

#[tokio::test]
async fn template_conflicts_and_validation() {
    let (_, app) = oracle_app(&[]);
    let (s, list) = get(&app, "/templates").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list[0]["id"], "default");
    assert_eq!(list[0]["read_only"], true);

    let (s, _) = put(&app, "/templates/default", thirteen()).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _) = put(&app, "/templates/mine", thirteen()).await;
    assert_eq!(s, StatusCode::OK);
    let (s, e) = put(&app, "/templates/mine", thirteen()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(e["error"].as_str().unwrap().contains("exists"));

    let mut edit = thirteen();
    edit["base_version"] = json!(1);
    let (s, t) = put(&app, "/templates/mine", edit.clone()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(t["version"], 2);
    // same base again is now stale
    let (s, _) = put(&app, "/templates/mine", edit).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, t) = get(&app, "/templates/mine").await;
    assert_eq!(t["version"], 2);

    let mut empty = thirteen();
    empty["questions"] = json!([]);
    let (s, e) = put(&app, "/templates/empty", empty).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(e["error"].is_string());
    let mut blank = thirteen();
    blank["questions"][2] = json!("  ");
    let (s, _) = put(&app, "/templates/blank", blank).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = get(&app, "/templates/empty").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _) = call(&app, Method::PUT, "/templates/x", Some(b"{not json".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn malformed_and_unknown_requests() {
    let (docs, truth) = with_course(25, 1);
    let (_, app) = oracle_app(&truth);
    let (s, e) = call(&app, Method::POST, "/documents", Some(b"{\"doc_id\": 3}".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(e["error"].is_string());
    let (s, _) = call(&app, Method::POST, "/jobs", Some(b"[]".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, "/jobs", json!({"doc_ids": []})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let ids = upload(&app, &docs).await;
    let (s, _) = get(&app, &format!("/results/{}", ids[0])).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for stages in [json!(["fields"]), json!(["anonymize", "features"]), json!(["anonymise"])] {
        let (s, _) = post(&app, "/jobs", json!({"doc_ids": ids, "stages": stages})).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{stages}");
    }

    let (s, _) = post(&app, "/jobs", json!({"doc_ids": ["nope"]})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, "/jobs", json!({"doc_ids": ids, "template_id": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for uri in ["/jobs/job-999999", "/results/nope", "/templates/nope", "/nowhere"] {
        let (s, _) = get(&app, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn validate_stage_needs_annotations() {
    let (docs, truth) = with_course(26, 2);
    let (_, bare) = app_with(common::resources_with(oracle_answer_key(&truth), None), 1);
    let ids = upload(&bare, &docs).await;
    let (s, _) = post(&bare, "/jobs", json!({"doc_ids": ids, "stages": ["anonymize", "fields", "features", "validate"]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (_, m) = get(&bare, "/metrics/validation").await;
    assert_eq!(m["annotations_loaded"], false);

    let (_, app) = oracle_app(&truth);
    let ids = upload(&app, &docs).await;
    let (s, job) = post(
        &app,
        "/jobs",
        json!({"doc_ids": ids, "stages": ["anonymize", "fields", "features", "validate"], "wait": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let rows = job["report"]["validation"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
}

#[tokio::test]
async fn same_patient_keeps_serial_across_jobs() {
    let (docs, truth) = with_course(27, 1);
    let (_, app) = oracle_app(&truth);
    let ids = upload(&app, &docs).await;
    let mut serials = Vec::new();
    for _ in 0..2 {
        let (s, _) = post(&app, "/jobs", json!({"doc_ids": ids, "stages": ["anonymize"], "wait": true})).await;
        assert_eq!(s, StatusCode::OK);
        let (_, r) = get(&app, &format!("/results/{}", ids[0])).await;
        assert!(r.get("answers").is_none());
        serials.push(r["serial"].clone());
    }
    assert_eq!(serials[0], json!("DS-000001"));
    assert_eq!(serials[0], serials[1]);
}

/// Oracle answers after a fixed delay, so a job stays running for a while.
struct Slow(AnswerKeyTransport, Duration);

impl LlmTransport for Slow {
    fn complete(&self, req: Completion<'_>) -> Result<String, TransportError> {
        std::thread::sleep(self.1);
        self.0.complete(req)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_finishes_running_job_and_fails_queued() {
    let (docs, truth) = with_course(28, 2);
    let slow = Slow(oracle_answer_key(&truth), Duration::from_millis(150));
    let res = Resources::new(LfSet::default_set(), Some(common::model().clone()), Arc::new(slow)).unwrap();
    let st = AppState::new(res, 1, None).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(Arc::clone(&st), listener, async {
        let _ = rx.await;
    }));

    let app = router(Arc::clone(&st));
    let ids = upload(&app, &docs).await;
    let mut jobs = Vec::new();
    for _ in 0..3 {
        let (s, j) = post(&app, "/jobs", json!({"doc_ids": ids})).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        jobs.push(j["job_id"].as_str().unwrap().to_string());
    }
    let t0 = Instant::now();
    while st.job(&jobs[0]).unwrap().status != JobStatus::Running {
        assert!(t0.elapsed() < Duration::from_secs(10));
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    // the real listener serves while jobs run
    let mut sock = tokio::net::TcpStream::connect(addr).await.unwrap();
    sock.write_all(b"GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut buf = Vec::new();
    sock.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8_lossy(&buf);
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");

    tx.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(30), server).await.unwrap().unwrap().unwrap();

    assert_eq!(st.job(&jobs[0]).unwrap().status, JobStatus::Done);
    for j in &jobs[1..] {
        let r = st.job(j).unwrap();
        assert_eq!(r.status, JobStatus::Failed);
        assert!(r.error.unwrap().contains("shut down"));
    }
    let (s, _) = post(&app, "/jobs", json!({"doc_ids": ids})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}
