//! Batch execution of the four stages with per-document quarantine.
//!
//! A document that fails a stage is recorded with its reason and dropped from
//! every later stage; the batch itself only fails on configuration or I/O
//! problems.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use medex_core::anonymizer::{anonymize, AnonymizedDocument, SerialRegistry};
use medex_core::docmodel::{parse_ocr_document, render_text};
use medex_core::evalkit::{
    report_to_csv, validation_report, AnnotationSet, TruthTable, ValidationRow, YesNo,
};
use medex_core::fieldex::{extract_record, records_from_csv, records_to_csv, ExtractionRecord, HeadingConfig};
use medex_core::labelmodel::{predict, LabelModelParams};
use medex_core::lfkit::LfSet;
use medex_core::promptex::{
    extract_features, intra_model_kappa, AnswerKeyTransport, FeatureRuns, HttpTransport, LlmConfig, LlmTransport,
    PromptTemplate, RateLimited,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;

/// Field holding the free text sent to the LLM.
pub const COURSE_FIELD: &str = "course_in_hospital";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Anonymize,
    Fields,
    Features,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Anonymize, Stage::Fields, Stage::Features, Stage::Validate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Anonymize => "anonymize",
            Stage::Fields => "fields",
            Stage::Features => "features",
            Stage::Validate => "validate",
        }
    }

    fn position(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("stage listed")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Stages must appear in pipeline order without gaps.
pub fn check_contiguous(stages: &[Stage]) -> Result<(), String> {
    if stages.windows(2).any(|w| w[1].position() != w[0].position() + 1) {
        let names: Vec<_> = stages.iter().map(|s| s.as_str()).collect();
        return Err(format!(
            "stages {names:?} are not consecutive in the order anonymize, fields, features, validate"
        ));
    }
    Ok(())
}

/// Validate-stage feature names for a template of `n` questions: the twelve
/// standard keys, then `q13`, `q14`, ...
pub fn feature_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            medex_core::promptex::FEATURE_KEYS
                .get(i)
                .map_or_else(|| format!("q{}", i + 1), |k| k.to_string())
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("input: {0}")]
    Input(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything the stages read: models, configs and the LLM transport.
pub struct Resources {
    pub lfs: LfSet,
    pub model: Option<LabelModelParams>,
    pub headings: HeadingConfig,
    pub template: PromptTemplate,
    pub llm: LlmConfig,
    pub transport: Arc<dyn LlmTransport>,
    /// Resolved per-feature ground truth, when annotations are configured.
    pub truth: Option<TruthTable>,
    pool: Arc<rayon::ThreadPool>,
}

impl Resources {
    /// Defaults everywhere except the LF set, model and transport: the
    /// shipped heading config and prompt, no annotations, four workers.
    pub fn new(
        lfs: LfSet,
        model: Option<LabelModelParams>,
        transport: Arc<dyn LlmTransport>,
    ) -> Result<Self, PipelineError> {
        if let Some(m) = &model {
            if m.lf_ids != lfs.ids() {
                return Err(PipelineError::Config(
                    "label-model checkpoint was trained with a different LF set".into(),
                ));
            }
        }
        let res = Self {
            lfs,
            model,
            headings: HeadingConfig::default(),
            template: PromptTemplate::default(),
            llm: LlmConfig::default(),
            transport,
            truth: None,
            pool: Arc::new(build_pool(4)?),
        };
        Ok(res)
    }

    pub fn set_workers(&mut self, workers: usize) -> Result<(), PipelineError> {
        self.pool = Arc::new(build_pool(workers)?);
        Ok(())
    }

    pub fn set_template(&mut self, template: PromptTemplate) -> Result<(), PipelineError> {
        template
            .validate()
            .map_err(|e| PipelineError::Config(format!("prompt template: {e}")))?;
        self.template = template;
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Loads every configured artifact. `mock_llm` selects the answer-key
    /// transport (all-`No` without a key file).
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let p = &cfg.paths;
        let conf = |e: &dyn fmt::Display| PipelineError::Config(e.to_string());
        let lfs = match &p.lf_set {
            Some(path) => LfSet::load(path).map_err(|e| conf(&e))?,
            None => LfSet::default_set(),
        };
        let model = match &p.model {
            Some(path) => Some(LabelModelParams::load(path).map_err(|e| conf(&e))?),
            None => None,
        };
        let headings = match &p.heading_config {
            Some(path) => HeadingConfig::load(path).map_err(|e| conf(&e))?,
            None => HeadingConfig::default(),
        };
        let template = match &p.template {
            Some(path) => {
                let bytes = fs::read(path).map_err(io_err(path))?;
                serde_json::from_slice(&bytes).map_err(|e| conf(&format!("{}: {e}", path.display())))?
            }
            None => PromptTemplate::default(),
        };
        let transport: Arc<dyn LlmTransport> = if cfg.mock_llm {
            let key = match &p.mock_answers {
                Some(path) => {
                    let bytes = fs::read(path).map_err(io_err(path))?;
                    AnswerKeyTransport::from_json(&bytes).map_err(|e| conf(&format!("{}: {e}", path.display())))?
                }
                None => AnswerKeyTransport::new(),
            };
            Arc::new(RateLimited::new(key, cfg.llm.max_in_flight))
        } else {
            Arc::new(RateLimited::new(HttpTransport::new(cfg.llm.clone()), cfg.llm.max_in_flight))
        };
        let truth = match &p.annotations {
            Some(path) => Some(load_truth(path)?),
            None => None,
        };
        let mut res = Self::new(lfs, model, transport)?;
        res.set_template(template)?;
        res.set_workers(cfg.workers)?;
        res.headings = headings;
        res.llm = cfg.llm.clone();
        res.truth = truth;
        Ok(res)
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

/// Reads a rater CSV and resolves it to one answer per cell.
pub fn load_truth(path: &Path) -> Result<TruthTable, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (ann, adj) = AnnotationSet::from_csv(&bytes).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    medex_core::evalkit::resolve_ground_truth(&ann, &adj)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

/// Raw bytes of one document with a source label (usually the file stem).
#[derive(Debug, Clone, PartialEq)]
pub struct InputDoc {
    pub source: String,
    pub bytes: Vec<u8>,
}

/// All `*.json` files in `dir`, sorted by file name.
pub fn read_input_dir(dir: &Path) -> Result<Vec<InputDoc>, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let source = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(InputDoc { source, bytes })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input: usize,
    pub succeeded: usize,
    pub failures: Vec<Failure>,
    /// Wall-clock milliseconds spent on each attempted document.
    pub per_doc_ms: BTreeMap<String, f64>,
    /// Sum of `per_doc_ms`.
    pub total_ms: f64,
    /// Elapsed time for the stage as a whole, including parallel overlap.
    pub wall_ms: f64,
}

impl StageReport {
    fn new(stage: Stage, input: usize) -> Self {
        Self {
            stage,
            input,
            succeeded: 0,
            failures: Vec::new(),
            per_doc_ms: BTreeMap::new(),
            total_ms: 0.0,
            wall_ms: 0.0,
        }
    }

    fn time(&mut self, doc_id: &str, ms: f64) {
        *self.per_doc_ms.entry(doc_id.to_string()).or_insert(0.0) += ms;
    }

    fn fail(&mut self, doc_id: &str, reason: impl Into<String>) {
        self.failures.push(Failure {
            doc_id: doc_id.to_string(),
            reason: reason.into(),
        });
    }

    fn finish(&mut self, started: Instant) {
        self.total_ms = self.per_doc_ms.values().sum();
        self.wall_ms = ms_since(started);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub input: usize,
    pub completed: usize,
    pub quarantined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureKappa {
    pub feature: String,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub totals: Totals,
    /// Run-1 vs run-2 kappa per question, when the features stage ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_model_kappa: Option<Vec<FeatureKappa>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<ValidationRow>>,
}

impl RunReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Every quarantined document with the stage that rejected it.
    pub fn quarantine(&self) -> Vec<(Stage, &Failure)> {
        self.stages
            .iter()
            .flat_map(|s| s.failures.iter().map(move |f| (s.stage, f)))
            .collect()
    }

    /// Population bookkeeping: each stage's input is the previous stage's
    /// successes, and each stage accounts for all of its input.
    pub fn check_consistency(&self) -> Result<(), String> {
        for s in &self.stages {
            if s.succeeded + s.failures.len() != s.input {
                return Err(format!("{}: {} + {} != {}", s.stage, s.succeeded, s.failures.len(), s.input));
            }
            if s.per_doc_ms.values().any(|&t| t.is_nan() || t < 0.0) {
                return Err(format!("{}: negative timing", s.stage));
            }
            let sum: f64 = s.per_doc_ms.values().sum();
            if (sum - s.total_ms).abs() > 1.0 {
                return Err(format!("{}: total {} vs per-doc sum {}", s.stage, s.total_ms, sum));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].input != w[0].succeeded {
                return Err(format!("{} input {} != {} survivors {}", w[1].stage, w[1].input, w[0].stage, w[0].succeeded));
            }
        }
        let q: usize = self.stages.iter().map(|s| s.failures.len()).sum();
        if q != self.totals.quarantined {
            return Err("quarantine total mismatch".into());
        }
        Ok(())
    }
}

/// Where a batch starts. Each variant feeds the stage of the same name.
#[derive(Debug, Clone)]
pub enum BatchInput {
    /// OCR-JSON to anonymize.
    Raw(Vec<InputDoc>),
    /// Already-anonymized OCR-JSON for field extraction.
    Anonymized(Vec<InputDoc>),
    Fields(Vec<ExtractionRecord>),
    /// Run-1 answers per document, for validation.
    Answers(Vec<(String, Vec<YesNo>)>),
}

impl BatchInput {
    pub fn first_stage(&self) -> Stage {
        match self {
            BatchInput::Raw(_) => Stage::Anonymize,
            BatchInput::Anonymized(_) => Stage::Fields,
            BatchInput::Fields(_) => Stage::Features,
            BatchInput::Answers(_) => Stage::Validate,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BatchInput::Raw(v) | BatchInput::Anonymized(v) => v.len(),
            BatchInput::Fields(v) => v.len(),
            BatchInput::Answers(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-stage outputs for the documents that passed that stage, in input order.
#[derive(Debug, Clone, Default)]
pub struct BatchOutput {
    pub anonymized: Vec<AnonymizedDocument>,
    pub fields: Vec<ExtractionRecord>,
    pub features: Vec<FeatureRuns>,
    pub validation: Option<Vec<ValidationRow>>,
}

pub struct Batch<'a> {
    pub input: BatchInput,
    pub stages: &'a [Stage],
    pub template: &'a PromptTemplate,
    /// Incremented once per document per stage.
    pub progress: Option<&'a AtomicUsize>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn tick(progress: Option<&AtomicUsize>, n: usize) {
    if let Some(p) = progress {
        p.fetch_add(n, Ordering::SeqCst);
    }
}

/// Data handed from one stage to the next.
enum Flow {
    Raw(Vec<InputDoc>),
    Texts(Vec<(String, Result<String, String>)>),
    Records(Vec<ExtractionRecord>),
    Answers(Vec<(String, Vec<YesNo>)>),
}

/// Runs `batch.stages`, which must start at the input's stage and be
/// consecutive.
pub fn process_batch(
    res: &Resources,
    registry: &Mutex<SerialRegistry>,
    batch: Batch<'_>,
) -> Result<(BatchOutput, RunReport), PipelineError> {
    let stages = batch.stages;
    check_contiguous(stages).map_err(PipelineError::Config)?;
    let first = batch.input.first_stage();
    match stages.first() {
        None => return Err(PipelineError::Config("no stages requested".into())),
        Some(s) if *s != first => {
            return Err(PipelineError::Config(format!(
                "input feeds the {first} stage but the run starts at {s}"
            )))
        }
        _ => {}
    }
    let n_input = batch.input.len();
    let progress = batch.progress;
    let mut out = BatchOutput::default();
    let mut reports = Vec::new();
    let mut intra = None;

    let mut flow = match batch.input {
        BatchInput::Raw(d) => Flow::Raw(d),
        BatchInput::Anonymized(d) => Flow::Texts(parse_for_fields(d)),
        BatchInput::Fields(r) => Flow::Records(r),
        BatchInput::Answers(a) => Flow::Answers(a),
    };
    for &stage in stages {
        flow = match (stage, flow) {
            (Stage::Anonymize, Flow::Raw(docs)) => {
                let (anon, rep) = anonymize_stage(res, registry, docs, progress)?;
                reports.push(rep);
                let texts = anon.iter().map(|a| (a.doc_id.clone(), Ok(a.render_text()))).collect();
                out.anonymized = anon;
                Flow::Texts(texts)
            }
            (Stage::Fields, Flow::Texts(texts)) => {
                let (records, rep) = fields_stage(res, texts, progress);
                reports.push(rep);
                out.fields = records.clone();
                Flow::Records(records)
            }
            (Stage::Features, Flow::Records(records)) => {
                let (runs, rep) = features_stage(res, batch.template, records, progress);
                reports.push(rep);
                if !runs.is_empty() {
                    let kappa = intra_model_kappa(&runs);
                    intra = Some(
                        feature_names(batch.template.len())
                            .into_iter()
                            .zip(kappa)
                            .map(|(feature, kappa)| FeatureKappa { feature, kappa })
                            .collect(),
                    );
                }
                let answers = runs.iter().map(|r| (r.run1.doc_id.clone(), r.run1.answers.clone())).collect();
                out.features = runs;
                Flow::Answers(answers)
            }
            (Stage::Validate, Flow::Answers(answers)) => {
                let (rows, rep) = validate_stage(res, answers, progress)?;
                reports.push(rep);
                out.validation = Some(rows);
                Flow::Answers(Vec::new())
            }
            _ => unreachable!("stage order checked above"),
        };
    }

    let quarantined = reports.iter().map(|r| r.failures.len()).sum();
    let completed = reports.last().map_or(0, |r| r.succeeded);
    let report = RunReport {
        totals: Totals {
            input: n_input,
            completed,
            quarantined,
        },
        intra_model_kappa: intra,
        validation: out.validation.clone(),
        stages: reports,
    };
    Ok((out, report))
}

fn parse_for_fields(docs: Vec<InputDoc>) -> Vec<(String, Result<String, String>)> {
    docs.into_iter()
        .map(|d| match parse_ocr_document(&d.bytes) {
            Ok(doc) => (doc.doc_id().to_string(), Ok(render_text(&doc))),
            Err(e) => (d.source, Err(e.to_string())),
        })
        .collect()
}

fn anonymize_stage(
    res: &Resources,
    registry: &Mutex<SerialRegistry>,
    docs: Vec<InputDoc>,
    progress: Option<&AtomicUsize>,
) -> Result<(Vec<AnonymizedDocument>, StageReport), PipelineError> {
    let model = res
        .model
        .as_ref()
        .ok_or_else(|| PipelineError::Config("the anonymize stage needs a label-model checkpoint".into()))?;
    let started = Instant::now();
    let mut rep = StageReport::new(Stage::Anonymize, docs.len());

    // Parsing and inference run in parallel; masking runs afterwards in input
    // order so serial numbers do not depend on scheduling.
    let predicted: Vec<_> = res.pool.install(|| {
        docs.par_iter()
            .map(|d| {
                let t = Instant::now();
                let r = parse_ocr_document(&d.bytes)
                    .map_err(|e| e.to_string())
                    .and_then(|doc| {
                        let labels = predict(model, &doc, &res.lfs).map_err(|e| e.to_string())?;
                        Ok((doc, labels))
                    });
                (r, ms_since(t))
            })
            .collect()
    });

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut reg = registry.lock().expect("registry lock poisoned");
    for (d, (r, ms)) in docs.iter().zip(predicted) {
        match r {
            Err(reason) => {
                rep.time(&d.source, ms);
                rep.fail(&d.source, reason);
            }
            Ok((doc, _)) if !seen.insert(doc.doc_id().to_string()) => {
                rep.time(&format!("{} (duplicate)", d.source), ms);
                rep.fail(doc.doc_id(), "duplicate doc_id in batch");
            }
            Ok((doc, labels)) => {
                let t = Instant::now();
                match anonymize(&doc, &labels, &mut reg) {
                    Ok(a) => {
                        rep.succeeded += 1;
                        out.push(a);
                    }
                    Err(e) => rep.fail(doc.doc_id(), e.to_string()),
                }
                rep.time(doc.doc_id(), ms + ms_since(t));
            }
        }
        tick(progress, 1);
    }
    rep.finish(started);
    Ok((out, rep))
}

fn fields_stage(
    res: &Resources,
    texts: Vec<(String, Result<String, String>)>,
    progress: Option<&AtomicUsize>,
) -> (Vec<ExtractionRecord>, StageReport) {
    let started = Instant::now();
    let mut rep = StageReport::new(Stage::Fields, texts.len());
    let results: Vec<_> = res.pool.install(|| {
        texts
            .par_iter()
            .map(|(id, text)| {
                let t = Instant::now();
                let r = text.as_ref().map(|text| extract_record(id, text, &res.headings)).map_err(Clone::clone);
                (r, ms_since(t))
            })
            .collect()
    });
    let mut out = Vec::new();
    for ((id, _), (r, ms)) in texts.iter().zip(results) {
        rep.time(id, ms);
        match r {
            Ok(rec) => {
                rep.succeeded += 1;
                out.push(rec);
            }
            Err(reason) => rep.fail(id, reason),
        }
    }
    tick(progress, texts.len());
    rep.finish(started);
    (out, rep)
}

fn features_stage(
    res: &Resources,
    template: &PromptTemplate,
    records: Vec<ExtractionRecord>,
    progress: Option<&AtomicUsize>,
) -> (Vec<FeatureRuns>, StageReport) {
    let started = Instant::now();
    let mut rep = StageReport::new(Stage::Features, records.len());
    let results: Vec<_> = res.pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let t = Instant::now();
                let r = match rec.get(COURSE_FIELD) {
                    None => Err(format!("no {COURSE_FIELD} field")),
                    Some(c) if c.trim().is_empty() => Err("empty course in hospital".to_string()),
                    Some(course) => extract_features(&rec.doc_id, course, template, &res.llm, &*res.transport)
                        .map_err(|e| e.to_string()),
                };
                tick(progress, 1);
                (r, ms_since(t))
            })
            .collect()
    });
    let mut out = Vec::new();
    for (rec, (r, ms)) in records.iter().zip(results) {
        rep.time(&rec.doc_id, ms);
        match r {
            Ok(runs) => {
                rep.succeeded += 1;
                out.push(runs);
            }
            Err(reason) => rep.fail(&rec.doc_id, reason),
        }
    }
    rep.finish(started);
    (out, rep)
}

fn validate_stage(
    res: &Resources,
    answers: Vec<(String, Vec<YesNo>)>,
    progress: Option<&AtomicUsize>,
) -> Result<(Vec<ValidationRow>, StageReport), PipelineError> {
    let truth = res
        .truth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("the validate stage needs annotations".into()))?;
    let started = Instant::now();
    let mut rep = StageReport::new(Stage::Validate, answers.len());
    let n = answers.first().map_or(0, |(_, a)| a.len());
    let names = feature_names(n);
    let mut predictions = TruthTable::new();
    for (doc_id, a) in &answers {
        let t = Instant::now();
        let missing = names
            .iter()
            .find(|f| truth.get(*f).and_then(|m| m.get(doc_id)).is_none());
        if a.len() != n {
            rep.fail(doc_id, format!("{} answers, expected {n}", a.len()));
        } else if let Some(f) = missing {
            rep.fail(doc_id, format!("no annotation for {f}"));
        } else {
            for (f, v) in names.iter().zip(a) {
                predictions.entry(f.clone()).or_default().insert(doc_id.clone(), *v);
            }
            rep.succeeded += 1;
        }
        rep.time(doc_id, ms_since(t));
    }
    tick(progress, answers.len());
    let rows = if rep.succeeded == 0 {
        Vec::new()
    } else {
        validation_report(&names, truth, &predictions).map_err(|e| PipelineError::Input(e.to_string()))?
    };
    rep.finish(started);
    Ok((rows, rep))
}

// Artifacts.

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub const ANONYMIZED_DIR: &str = "anonymized";
pub const FIELDS_CSV: &str = "fields.csv";
pub const ANSWERS_CSV: &str = "answers.csv";
pub const VALIDATION_CSV: &str = "validation.csv";
pub const REPORT_JSON: &str = "report.json";

/// `doc_id,run,<feature...>` with one row per run.
pub fn answers_to_csv(runs: &[FeatureRuns], n_questions: usize) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["doc_id".to_string(), "run".to_string()];
    header.extend(feature_names(n_questions));
    w.write_record(&header).expect("write to vec");
    for r in runs {
        for run in [&r.run1, &r.run2] {
            let mut row = vec![run.doc_id.clone(), run.run_index.to_string()];
            row.extend(run.answers.iter().map(|a| a.as_str().to_string()));
            w.write_record(&row).expect("write to vec");
        }
    }
    w.into_inner().expect("flush vec")
}

/// Run-1 rows of an answers CSV.
pub fn answers_from_csv(bytes: &[u8]) -> Result<Vec<(String, Vec<YesNo>)>, PipelineError> {
    let bad = |e: &dyn fmt::Display| PipelineError::Input(format!("answers CSV: {e}"));
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(|e| bad(&e))?.clone();
    if header.get(0) != Some("doc_id") || header.get(1) != Some("run") {
        return Err(bad(&"header must start with doc_id,run"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        if &rec[1] != "1" {
            continue;
        }
        let answers = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<YesNo>().map_err(|e| bad(&e)))
            .collect::<Result<_, _>>()?;
        out.push((rec[0].to_string(), answers));
    }
    Ok(out)
}

/// Persists each stage's output under `dir`, plus `report.json`.
pub fn write_artifacts(
    dir: &Path,
    res: &Resources,
    template: &PromptTemplate,
    out: &BatchOutput,
    report: &RunReport,
) -> Result<(), PipelineError> {
    let stages: Vec<Stage> = report.stages.iter().map(|s| s.stage).collect();
    if stages.contains(&Stage::Anonymize) {
        for a in &out.anonymized {
            let bytes = a.to_ocr_json().map_err(|e| PipelineError::Input(e.to_string()))?;
            atomic_write(&dir.join(ANONYMIZED_DIR).join(format!("{}.json", a.doc_id)), &bytes)?;
        }
    }
    if stages.contains(&Stage::Fields) {
        atomic_write(&dir.join(FIELDS_CSV), &records_to_csv(&out.fields, &res.headings))?;
    }
    if stages.contains(&Stage::Features) {
        atomic_write(&dir.join(ANSWERS_CSV), &answers_to_csv(&out.features, template.len()))?;
    }
    if let Some(rows) = &out.validation {
        atomic_write(&dir.join(VALIDATION_CSV), &report_to_csv(rows))?;
    }
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    atomic_write(&dir.join(REPORT_JSON), &json)
}

/// Reads the input a stage-isolated run starts from. `input` is a directory
/// of OCR-JSON for the first two stages, and a CSV file (or a directory
/// holding the stage's CSV) for the last two.
pub fn load_batch_input(stage: Stage, input: &Path, headings: &HeadingConfig) -> Result<BatchInput, PipelineError> {
    let csv_path = |name: &str| {
        if input.is_dir() {
            input.join(name)
        } else {
            input.to_path_buf()
        }
    };
    Ok(match stage {
        Stage::Anonymize => BatchInput::Raw(read_input_dir(input)?),
        Stage::Fields => BatchInput::Anonymized(read_input_dir(input)?),
        Stage::Features => {
            let path = csv_path(FIELDS_CSV);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            BatchInput::Fields(records_from_csv(&bytes, headings).map_err(|e| PipelineError::Input(e.to_string()))?)
        }
        Stage::Validate => {
            let path = csv_path(ANSWERS_CSV);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            BatchInput::Answers(answers_from_csv(&bytes)?)
        }
    })
}

/// Loads input, runs `stages`, writes artifacts and persists the registry.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    res: &Resources,
    stages: &[Stage],
    input: BatchInput,
) -> Result<RunReport, PipelineError> {
    let registry_path = cfg.registry_path();
    let registry = if stages.contains(&Stage::Anonymize) {
        SerialRegistry::open(&registry_path).map_err(|e| PipelineError::Input(e.to_string()))?
    } else {
        SerialRegistry::new()
    };
    let registry = Mutex::new(registry);
    let (out, report) = process_batch(
        res,
        &registry,
        Batch {
            input,
            stages,
            template: &res.template,
            progress: None,
        },
    )?;
    write_artifacts(&cfg.paths.output_dir, res, &res.template, &out, &report)?;
    if stages.contains(&Stage::Anonymize) {
        if let Some(dir) = registry_path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        registry
            .into_inner()
            .expect("registry lock poisoned")
            .persist()
            .map_err(|e| PipelineError::Input(e.to_string()))?;
    }
    tracing::info!(
        input = report.totals.input,
        completed = report.totals.completed,
        quarantined = report.totals.quarantined,
        "run finished"
    );
    Ok(report)
}

/// Every enabled stage over the raw documents in `paths.input_dir`.
pub fn run_all(cfg: &PipelineConfig, res: &Resources) -> Result<RunReport, PipelineError> {
    let stages = cfg.enabled_stages();
    let input = BatchInput::Raw(read_input_dir(&cfg.paths.input_dir)?);
    run_pipeline(cfg, res, &stages, input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("ocr".parse::<Stage>().is_err());
    }

    #[test]
    fn contiguity() {
        use Stage::*;
        assert!(check_contiguous(&[Anonymize, Fields, Features]).is_ok());
        assert!(check_contiguous(&[Features, Validate]).is_ok());
        assert!(check_contiguous(&[]).is_ok());
        assert!(check_contiguous(&[Anonymize, Features]).is_err());
        assert!(check_contiguous(&[Fields, Anonymize]).is_err());
    }

    #[test]
    fn feature_names_extend_past_twelve() {
        let n = feature_names(13);
        assert_eq!(n[0], "nephrologist_consult");
        assert_eq!(n[12], "q13");
    }

    #[test]
    fn answers_csv_round_trip() {
        use medex_core::promptex::FeatureAnswers;
        let a = |v: &[bool]| v.iter().map(|&b| YesNo::from_bool(b)).collect::<Vec<_>>();
        let runs = vec![FeatureRuns {
            run1: FeatureAnswers {
                doc_id: "d1".into(),
                answers: a(&[true, false]),
                raw_response: String::new(),
                run_index: 1,
            },
            run2: FeatureAnswers {
                doc_id: "d1".into(),
                answers: a(&[true, true]),
                raw_response: String::new(),
                run_index: 2,
            },
            agreement: vec![true, false],
        }];
        let csv = answers_to_csv(&runs, 2);
        assert_eq!(answers_from_csv(&csv).unwrap(), vec![("d1".to_string(), a(&[true, false]))]);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
