//! Label-model training from OCR-JSON documents and a token gold-label CSV.

use std::collections::HashSet;

use medex_core::docmodel::{parse_ocr_document, Document};
use medex_core::labelmodel::{featurize_document, train, LabelModelParams, TrainingConfig};
use medex_core::lfkit::{build_label_matrix, GoldLabels, LfSet};
use medex_core::ClassLabel;

use crate::pipeline::{InputDoc, PipelineError};

/// Reads `doc_id,token_id,...,label` rows; other columns are ignored.
pub fn gold_labels_from_csv(bytes: &[u8]) -> Result<GoldLabels, PipelineError> {
    let bad = |m: String| PipelineError::Input(format!("gold labels: {m}"));
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let (doc, tok, lab) = (col("doc_id")?, col("token_id")?, col("label")?);
    let mut gold = GoldLabels::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let token_id: usize = rec[tok]
            .parse()
            .map_err(|_| bad(format!("row {}: bad token_id {:?}", line + 2, &rec[tok])))?;
        let label: ClassLabel = rec[lab].parse().map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
        gold.insert((rec[doc].to_string(), token_id), label);
    }
    Ok(gold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub docs_used: usize,
    /// Input files that failed to parse, with reasons.
    pub skipped: Vec<(String, String)>,
    pub tokens: usize,
    pub gold_tokens: usize,
}

/// Parses the inputs (skipping malformed ones) and trains on all tokens,
/// with `gold` supervising the labeled subset.
pub fn train_from_inputs(
    inputs: &[InputDoc],
    gold: &GoldLabels,
    lfs: &LfSet,
    cfg: &TrainingConfig,
) -> Result<(LabelModelParams, TrainingSummary), PipelineError> {
    let mut docs: Vec<Document> = Vec::new();
    let mut skipped = Vec::new();
    for inp in inputs {
        match parse_ocr_document(&inp.bytes) {
            Ok(d) => docs.push(d),
            Err(e) => skipped.push((inp.source.clone(), e.to_string())),
        }
    }
    let (params, mut summary) = train_from_documents(&docs, gold, lfs, cfg)?;
    summary.skipped = skipped;
    Ok((params, summary))
}

pub fn train_from_documents(
    docs: &[Document],
    gold: &GoldLabels,
    lfs: &LfSet,
    cfg: &TrainingConfig,
) -> Result<(LabelModelParams, TrainingSummary), PipelineError> {
    if docs.is_empty() {
        return Err(PipelineError::Input("no documents to train on".into()));
    }
    let ids: HashSet<&str> = docs.iter().map(|d| d.doc_id()).collect();
    if let Some(((d, _), _)) = gold.iter().find(|((d, _), _)| !ids.contains(d.as_str())) {
        tracing::warn!(doc_id = %d, "gold labels reference a document not in the training set");
    }
    let matrix = build_label_matrix(lfs, docs, Some(gold)).map_err(|e| PipelineError::Input(e.to_string()))?;
    let features: Vec<Vec<f64>> = docs.iter().flat_map(featurize_document).collect();
    let params = train(&matrix, &features, cfg).map_err(|e| PipelineError::Input(e.to_string()))?;
    let summary = TrainingSummary {
        docs_used: docs.len(),
        skipped: Vec::new(),
        tokens: matrix.n_rows(),
        gold_tokens: matrix.n_gold(),
    };
    Ok((params, summary))
}
