//! Synthetic batches on disk: OCR-JSON inputs, planted truth and a ready
//! config.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use medex_core::docmodel::Document;
use medex_core::synthcorpus::{
    annotations_csv, fields_csv, flags_csv, generate_corpus, labels_csv, malformed_payload, oracle_answer_key,
    CorpusSpec, GroundTruth,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, StageToggles};
use crate::pipeline::{atomic_write, InputDoc, PipelineError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub spec: CorpusSpec,
    /// Documents replaced by broken OCR-JSON. They are drawn from documents
    /// that have a course section, so the empty-course count is unaffected.
    pub malformed: usize,
    /// Leading well-formed documents whose token labels go to `gold_labels.csv`.
    pub gold_docs: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            spec: CorpusSpec::default(),
            malformed: 0,
            gold_docs: 20,
        }
    }
}

impl SynthOptions {
    /// Sets the empty-course quota to exactly `n` documents.
    pub fn with_empty_courses(mut self, n: usize) -> Self {
        self.spec.empty_course_rate = n as f64 / self.spec.n_docs.max(1) as f64;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_docs: usize,
    pub malformed: Vec<String>,
    pub empty_course: Vec<String>,
    pub gold_docs: Vec<String>,
}

pub struct SynthBatch {
    pub inputs: Vec<InputDoc>,
    pub docs: Vec<Document>,
    pub truth: Vec<GroundTruth>,
    pub summary: SynthSummary,
}

pub fn synth_batch(opts: &SynthOptions) -> Result<SynthBatch, PipelineError> {
    let (docs, truth) = generate_corpus(&opts.spec).map_err(PipelineError::Config)?;
    let mut candidates: Vec<usize> = (0..docs.len()).filter(|&i| !truth[i].course_is_empty()).collect();
    if opts.malformed > candidates.len() {
        return Err(PipelineError::Config(format!(
            "cannot corrupt {} of {} documents with a course section",
            opts.malformed,
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.spec.seed ^ 0x6d61_6c66);
    candidates.shuffle(&mut rng);
    let mut broken: Vec<usize> = candidates.into_iter().take(opts.malformed).collect();
    broken.sort_unstable();
    let broken_set: HashSet<usize> = broken.iter().copied().collect();

    let inputs = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let valid = d.to_ocr_json();
            let bytes = match broken.iter().position(|&b| b == i) {
                Some(k) => malformed_payload(&valid, k),
                None => valid,
            };
            InputDoc {
                source: d.doc_id().to_string(),
                bytes,
            }
        })
        .collect();
    let summary = SynthSummary {
        n_docs: docs.len(),
        malformed: broken.iter().map(|&i| truth[i].doc_id.clone()).collect(),
        empty_course: truth.iter().filter(|g| g.course_is_empty()).map(|g| g.doc_id.clone()).collect(),
        gold_docs: (0..docs.len())
            .filter(|i| !broken_set.contains(i))
            .take(opts.gold_docs)
            .map(|i| truth[i].doc_id.clone())
            .collect(),
    };
    Ok(SynthBatch {
        inputs,
        docs,
        truth,
        summary,
    })
}

pub const DOCS_DIR: &str = "docs";
pub const TRUTH_DIR: &str = "truth";
pub const CONFIG_FILE: &str = "pipeline.toml";

/// Writes `docs/*.json`, `truth/*` and a `pipeline.toml` that runs every
/// stage with the mock LLM against the written truth. The config expects the
/// model at `model.json`, produced by `train-labelmodel`.
pub fn write_synth_batch(dir: &Path, opts: &SynthOptions) -> Result<(SynthBatch, PathBuf), PipelineError> {
    let batch = synth_batch(opts)?;
    for inp in &batch.inputs {
        atomic_write(&dir.join(DOCS_DIR).join(format!("{}.json", inp.source)), &inp.bytes)?;
    }
    let truth_dir = dir.join(TRUTH_DIR);
    let gold: HashSet<&str> = batch.summary.gold_docs.iter().map(String::as_str).collect();
    let (gold_docs, gold_truth): (Vec<Document>, Vec<GroundTruth>) = batch
        .docs
        .iter()
        .zip(&batch.truth)
        .filter(|(d, _)| gold.contains(d.doc_id()))
        .map(|(d, t)| (d.clone(), t.clone()))
        .unzip();
    atomic_write(&truth_dir.join("labels.csv"), &labels_csv(&batch.docs, &batch.truth))?;
    atomic_write(&truth_dir.join("gold_labels.csv"), &labels_csv(&gold_docs, &gold_truth))?;
    atomic_write(&truth_dir.join("fields.csv"), &fields_csv(&batch.truth))?;
    atomic_write(&truth_dir.join("flags.csv"), &flags_csv(&batch.truth))?;
    atomic_write(&truth_dir.join("annotations.csv"), &annotations_csv(&batch.truth))?;
    atomic_write(&truth_dir.join("mock_answers.json"), &oracle_answer_key(&batch.truth).to_json())?;
    let summary = serde_json::to_vec_pretty(&batch.summary).expect("summary serializes");
    atomic_write(&truth_dir.join("summary.json"), &summary)?;

    let mut cfg = PipelineConfig::default();
    cfg.paths.input_dir = DOCS_DIR.into();
    cfg.paths.output_dir = "out".into();
    cfg.paths.model = Some("model.json".into());
    cfg.paths.annotations = Some(format!("{TRUTH_DIR}/annotations.csv").into());
    cfg.paths.gold_labels = Some(format!("{TRUTH_DIR}/gold_labels.csv").into());
    cfg.paths.mock_answers = Some(format!("{TRUTH_DIR}/mock_answers.json").into());
    cfg.mock_llm = true;
    cfg.stages = StageToggles {
        validate: true,
        ..StageToggles::default()
    };
    cfg.training.seed = opts.spec.seed;
    let cfg_path = dir.join(CONFIG_FILE);
    atomic_write(&cfg_path, cfg.to_toml().as_bytes())?;
    Ok((batch, cfg_path))
}
