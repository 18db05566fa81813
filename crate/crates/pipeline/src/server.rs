//! REST service backing the operator console.
//!
//! Jobs run on a bounded number of slots; each job executes the batch on a
//! blocking thread and records per-document results as it finishes. On
//! shutdown, running jobs complete and queued ones are marked failed.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medex_core::anonymizer::{serial_placeholder, SerialRegistry};
use medex_core::docmodel::parse_ocr_document;
use medex_core::evalkit::{validation_report, TruthTable, ValidationRow, YesNo};
use medex_core::promptex::{intra_model_kappa, FeatureRuns, PromptTemplate};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

use crate::pipeline::{
    check_contiguous, feature_names, process_batch, Batch, BatchInput, FeatureKappa, InputDoc, Resources, RunReport,
    Stage,
};

pub const DEFAULT_TEMPLATE_ID: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub status: JobStatus,
    /// Completed document-stage units over the job's total.
    pub progress: f64,
    pub doc_ids: Vec<String>,
    pub stages: Vec<Stage>,
    pub template_id: String,
    pub template_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTemplate {
    pub id: String,
    pub version: u64,
    pub read_only: bool,
    pub template: PromptTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineInfo {
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswersView {
    pub questions: Vec<String>,
    pub run1: Vec<YesNo>,
    pub run2: Vec<YesNo>,
    pub agreement: Vec<bool>,
    /// 1-based indices where the runs differ.
    pub disagreements: Vec<usize>,
}

impl AnswersView {
    fn new(t: &PromptTemplate, r: &FeatureRuns) -> Self {
        Self {
            questions: t.questions.clone(),
            run1: r.run1.answers.clone(),
            run2: r.run2.answers.clone(),
            agreement: r.agreement.clone(),
            disagreements: r.disagreements(),
        }
    }
}

/// Latest outputs for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocResult {
    pub doc_id: String,
    pub job_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anonymized_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serial: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<AnswersView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarantine: Option<QuarantineInfo>,
}

pub struct AppState {
    res: Arc<Resources>,
    registry: Arc<Mutex<SerialRegistry>>,
    persist_registry: bool,
    docs: Mutex<BTreeMap<String, Vec<u8>>>,
    templates: Mutex<BTreeMap<String, StoredTemplate>>,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    results: Mutex<BTreeMap<String, DocResult>>,
    next_job: AtomicU64,
    slots: Arc<Semaphore>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    shutting_down: AtomicBool,
}

impl AppState {
    /// `registry_path` makes serials persistent across restarts.
    pub fn new(
        res: Resources,
        job_workers: usize,
        registry_path: Option<PathBuf>,
    ) -> Result<Arc<Self>, medex_core::anonymizer::AnonError> {
        let registry = match &registry_path {
            Some(p) => SerialRegistry::open(p)?,
            None => SerialRegistry::new(),
        };
        let mut templates = BTreeMap::new();
        templates.insert(
            DEFAULT_TEMPLATE_ID.to_string(),
            StoredTemplate {
                id: DEFAULT_TEMPLATE_ID.to_string(),
                version: 1,
                read_only: true,
                template: res.template.clone(),
            },
        );
        Ok(Arc::new(Self {
            res: Arc::new(res),
            registry: Arc::new(Mutex::new(registry)),
            persist_registry: registry_path.is_some(),
            docs: Mutex::new(BTreeMap::new()),
            templates: Mutex::new(templates),
            jobs: Mutex::new(BTreeMap::new()),
            results: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            slots: Arc::new(Semaphore::new(job_workers.max(1))),
            tasks: Mutex::new(Vec::new()),
            shutting_down: AtomicBool::new(false),
        }))
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        lock(&self.jobs).get(id).cloned()
    }

    /// Stops taking jobs, lets running jobs finish and fails queued ones.
    pub async fn drain(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        loop {
            let handles: Vec<_> = lock(&self.tasks).drain(..).collect();
            if handles.is_empty() {
                break;
            }
            for h in handles {
                let _ = h.await;
            }
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().expect("state lock poisoned")
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/documents", post(upload_document))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/results/{doc_id}", get(get_result))
        .route("/templates", get(list_templates))
        .route("/templates/{id}", get(get_template).put(put_template))
        .route("/metrics/validation", get(validation_metrics))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn upload_document(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let doc = parse_ocr_document(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = doc.doc_id().to_string();
    lock(&st.docs).insert(id.clone(), body.to_vec());
    lock(&st.results).remove(&id);
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({
            "doc_id": id,
            "pages": doc.page_count(),
            "tokens": doc.len(),
        })),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    doc_ids: Vec<String>,
    #[serde(default)]
    stages: Option<Vec<Stage>>,
    #[serde(default)]
    template_id: Option<String>,
    /// Respond only once the job has finished.
    #[serde(default)]
    wait: bool,
}

async fn create_job(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: JobRequest = parse_body(&body)?;
    if st.shutting_down.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "server is shutting down"));
    }
    if req.doc_ids.is_empty() {
        return Err(ApiError::bad_request("doc_ids is empty"));
    }
    let stages = req
        .stages
        .unwrap_or_else(|| vec![Stage::Anonymize, Stage::Fields, Stage::Features]);
    if stages.first() != Some(&Stage::Anonymize) {
        return Err(ApiError::bad_request("stages must start with anonymize"));
    }
    check_contiguous(&stages).map_err(ApiError::bad_request)?;
    if stages.contains(&Stage::Validate) && st.res.truth.is_none() {
        return Err(ApiError::bad_request("validate requested but no annotations are configured"));
    }
    let inputs = {
        let docs = lock(&st.docs);
        req.doc_ids
            .iter()
            .map(|id| {
                docs.get(id)
                    .map(|b| InputDoc {
                        source: id.clone(),
                        bytes: b.clone(),
                    })
                    .ok_or_else(|| ApiError::not_found(format!("unknown doc_id {id}")))
            })
            .collect::<ApiResult<Vec<_>>>()?
    };
    let template_id = req.template_id.unwrap_or_else(|| DEFAULT_TEMPLATE_ID.to_string());
    let stored = lock(&st.templates)
        .get(&template_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown template {template_id}")))?;

    let job_id = format!("job-{:06}", st.next_job.fetch_add(1, Ordering::SeqCst));
    let record = JobRecord {
        job_id: job_id.clone(),
        status: JobStatus::Queued,
        progress: 0.0,
        doc_ids: req.doc_ids,
        stages: stages.clone(),
        template_id,
        template_version: stored.version,
        report: None,
        error: None,
    };
    lock(&st.jobs).insert(job_id.clone(), record.clone());

    let handle = tokio::spawn(run_job(Arc::clone(&st), job_id.clone(), inputs, stages, stored.template));
    if req.wait {
        let _ = handle.await;
        let done = st.job(&job_id).expect("job recorded");
        return Ok((StatusCode::OK, Json(done)).into_response());
    }
    lock(&st.tasks).push(handle);
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

fn update_job(st: &AppState, id: &str, f: impl FnOnce(&mut JobRecord)) {
    if let Some(j) = lock(&st.jobs).get_mut(id) {
        f(j);
    }
}

async fn run_job(st: Arc<AppState>, job_id: String, inputs: Vec<InputDoc>, stages: Vec<Stage>, template: PromptTemplate) {
    let Ok(_permit) = Arc::clone(&st.slots).acquire_owned().await else {
        update_job(&st, &job_id, |j| {
            j.status = JobStatus::Failed;
            j.error = Some("job queue closed".into());
        });
        return;
    };
    if st.shutting_down.load(Ordering::SeqCst) {
        update_job(&st, &job_id, |j| {
            j.status = JobStatus::Failed;
            j.error = Some("server shut down before the job started".into());
        });
        return;
    }
    update_job(&st, &job_id, |j| j.status = JobStatus::Running);

    let units_total = (inputs.len() * stages.len()).max(1) as f64;
    let units = Arc::new(AtomicUsize::new(0));
    let work = {
        let st = Arc::clone(&st);
        let units = Arc::clone(&units);
        let template = template.clone();
        let stages = stages.clone();
        tokio::task::spawn_blocking(move || {
            process_batch(
                &st.res,
                &st.registry,
                Batch {
                    input: BatchInput::Raw(inputs),
                    stages: &stages,
                    template: &template,
                    progress: Some(&units),
                },
            )
        })
    };
    let poller = {
        let st = Arc::clone(&st);
        let units = Arc::clone(&units);
        let job_id = job_id.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                let p = units.load(Ordering::SeqCst) as f64 / units_total;
                update_job(&st, &job_id, |j| j.progress = p.min(1.0));
            }
        })
    };
    let outcome = work.await;
    poller.abort();

    match outcome {
        Ok(Ok((out, report))) => {
            store_results(&st, &job_id, &template, &out, &report);
            if st.persist_registry {
                if let Err(e) = lock(&st.registry).persist() {
                    tracing::error!(error = %e, "persisting serial registry");
                }
            }
            update_job(&st, &job_id, |j| {
                j.status = JobStatus::Done;
                j.progress = 1.0;
                j.report = Some(report);
            });
        }
        Ok(Err(e)) => update_job(&st, &job_id, |j| {
            j.status = JobStatus::Failed;
            j.error = Some(e.to_string());
        }),
        Err(e) => update_job(&st, &job_id, |j| {
            j.status = JobStatus::Failed;
            j.error = Some(format!("job panicked: {e}"));
        }),
    }
}

fn store_results(
    st: &AppState,
    job_id: &str,
    template: &PromptTemplate,
    out: &crate::pipeline::BatchOutput,
    report: &RunReport,
) {
    let mut fresh: BTreeMap<String, DocResult> = BTreeMap::new();
    fn slot<'a>(m: &'a mut BTreeMap<String, DocResult>, id: &str, job_id: &str) -> &'a mut DocResult {
        m.entry(id.to_string()).or_insert_with(|| DocResult {
            doc_id: id.to_string(),
            job_id: job_id.to_string(),
            anonymized_text: None,
            serial: None,
            fields: None,
            answers: None,
            quarantine: None,
        })
    }
    for a in &out.anonymized {
        let r = slot(&mut fresh, &a.doc_id, job_id);
        r.anonymized_text = Some(a.render_text());
        r.serial = a.serial.map(serial_placeholder);
    }
    for rec in &out.fields {
        slot(&mut fresh, &rec.doc_id, job_id).fields = Some(rec.fields.iter().cloned().collect());
    }
    for runs in &out.features {
        slot(&mut fresh, &runs.run1.doc_id, job_id).answers = Some(AnswersView::new(template, runs));
    }
    for (stage, f) in report.quarantine() {
        slot(&mut fresh, &f.doc_id, job_id).quarantine = Some(QuarantineInfo {
            stage,
            reason: f.reason.clone(),
        });
    }
    lock(&st.results).extend(fresh);
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    st.job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

async fn get_result(State(st): State<Arc<AppState>>, Path(doc_id): Path<String>) -> ApiResult<Json<DocResult>> {
    if let Some(r) = lock(&st.results).get(&doc_id) {
        return Ok(Json(r.clone()));
    }
    if lock(&st.docs).contains_key(&doc_id) {
        return Err(ApiError::not_found(format!("no results yet for {doc_id}")));
    }
    Err(ApiError::not_found(format!("unknown doc_id {doc_id}")))
}

async fn list_templates(State(st): State<Arc<AppState>>) -> Json<Vec<StoredTemplate>> {
    Json(lock(&st.templates).values().cloned().collect())
}

async fn get_template(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StoredTemplate>> {
    lock(&st.templates)
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown template {id}")))
}

#[derive(Debug, Deserialize)]
struct TemplatePut {
    #[serde(flatten)]
    template: PromptTemplate,
    /// Version the edit was based on; required when replacing.
    #[serde(default)]
    base_version: Option<u64>,
}

async fn put_template(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<StoredTemplate>> {
    let put: TemplatePut = parse_body(&body)?;
    if id.trim().is_empty() {
        return Err(ApiError::bad_request("empty template id"));
    }
    put.template
        .validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let mut templates = lock(&st.templates);
    let version = match (templates.get(&id), put.base_version) {
        (Some(t), _) if t.read_only => return Err(ApiError::conflict(format!("template {id} is read-only"))),
        (Some(_), None) => return Err(ApiError::conflict(format!("template {id} already exists"))),
        (Some(t), Some(v)) if v != t.version => {
            return Err(ApiError::conflict(format!(
                "template {id} is at version {}, edit was based on {v}",
                t.version
            )))
        }
        (Some(t), Some(_)) => t.version + 1,
        (None, Some(v)) if v != 0 => return Err(ApiError::conflict(format!("template {id} does not exist"))),
        (None, _) => 1,
    };
    let stored = StoredTemplate {
        id: id.clone(),
        version,
        read_only: false,
        template: put.template,
    };
    templates.insert(id, stored.clone());
    Ok(Json(stored))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub annotations_loaded: bool,
    /// Documents with twelve-question answers that were scored.
    pub n_docs: usize,
    pub rows: Vec<ValidationRow>,
    pub intra_model_kappa: Vec<FeatureKappa>,
}

/// Scores the stored run-1 answers of every document answered with a
/// twelve-question template against the configured annotations.
async fn validation_metrics(State(st): State<Arc<AppState>>) -> ApiResult<Json<ValidationMetrics>> {
    let names = feature_names(12);
    let results = lock(&st.results);
    let answered: Vec<(&String, &AnswersView)> = results
        .iter()
        .filter_map(|(id, r)| r.answers.as_ref().map(|a| (id, a)))
        .filter(|(_, a)| a.run1.len() == names.len())
        .collect();
    let mut predictions = TruthTable::new();
    for (id, a) in &answered {
        for (f, v) in names.iter().zip(&a.run1) {
            predictions.entry(f.clone()).or_default().insert((*id).clone(), *v);
        }
    }
    let runs: Vec<FeatureRuns> = answered
        .iter()
        .map(|(id, a)| {
            let fa = |answers: &[YesNo], run_index| medex_core::promptex::FeatureAnswers {
                doc_id: (*id).clone(),
                answers: answers.to_vec(),
                raw_response: String::new(),
                run_index,
            };
            FeatureRuns {
                run1: fa(&a.run1, 1),
                run2: fa(&a.run2, 2),
                agreement: a.agreement.clone(),
            }
        })
        .collect();
    let intra = names
        .iter()
        .cloned()
        .zip(intra_model_kappa(&runs))
        .map(|(feature, kappa)| FeatureKappa { feature, kappa })
        .collect();
    let (rows, n_docs) = match &st.res.truth {
        Some(truth) => {
            let scored = answered
                .iter()
                .filter(|(id, _)| names.iter().all(|f| truth.get(f).is_some_and(|m| m.contains_key(*id))))
                .count();
            if scored == 0 {
                return Ok(Json(ValidationMetrics {
                    annotations_loaded: true,
                    n_docs: 0,
                    rows: Vec::new(),
                    intra_model_kappa: intra,
                }));
            }
            let rows = validation_report(&names, truth, &predictions).map_err(|e| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("cannot score answers: {e}"))
            })?;
            (rows, scored)
        }
        None => (Vec::new(), 0),
    };
    Ok(Json(ValidationMetrics {
        annotations_loaded: st.res.truth.is_some(),
        n_docs,
        rows,
        intra_model_kappa: intra,
    }))
}

/// Binds `bind`, serves until `shutdown` resolves, then drains the job queue.
pub async fn serve(
    state: Arc<AppState>,
    bind: &str,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(state, listener, shutdown).await
}

pub async fn serve_on(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::clone(&state)))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.drain().await;
    Ok(())
}
