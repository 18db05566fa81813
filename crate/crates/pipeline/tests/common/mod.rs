#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use medex_core::evalkit::{resolve_ground_truth, AnnotationSet, TruthTable};
use medex_core::labelmodel::{LabelModelParams, TrainingConfig};
use medex_core::lfkit::{GoldLabels, LfSet};
use medex_core::promptex::AnswerKeyTransport;
use medex_core::synthcorpus::{annotations_csv, generate_corpus, oracle_answer_key, CorpusSpec, GroundTruth};
use medex_pipeline::train::train_from_documents;
use medex_pipeline::Resources;

/// Training corpus seed, kept apart from the seeds the tests process.
pub const TRAIN_SEED: u64 = 1000;

pub fn gold_for(truth: &[GroundTruth], n: usize) -> GoldLabels {
    let mut gold = GoldLabels::new();
    for gt in truth.iter().take(n) {
        for (i, l) in gt.labels.iter().enumerate() {
            gold.insert((gt.doc_id.clone(), i), *l);
        }
    }
    gold
}

/// Label model trained once per test binary on 200 synthetic documents, 20 of
/// them gold-labeled.
pub fn model() -> &'static LabelModelParams {
    static MODEL: OnceLock<LabelModelParams> = OnceLock::new();
    MODEL.get_or_init(|| {
        let (docs, truth) = generate_corpus(&CorpusSpec {
            seed: TRAIN_SEED,
            ..CorpusSpec::default()
        })
        .unwrap();
        let (params, _) =
            train_from_documents(&docs, &gold_for(&truth, 20), &LfSet::default_set(), &TrainingConfig::default())
                .unwrap();
        params
    })
}

pub fn truth_table(truth: &[GroundTruth]) -> TruthTable {
    let (ann, adj) = AnnotationSet::from_csv(&annotations_csv(truth)).unwrap();
    resolve_ground_truth(&ann, &adj).unwrap()
}

pub fn resources_with(key: AnswerKeyTransport, truth: Option<TruthTable>) -> Resources {
    let mut res = Resources::new(LfSet::default_set(), Some(model().clone()), Arc::new(key)).unwrap();
    res.truth = truth;
    res
}

/// Oracle answer key and annotations for `truth`.
pub fn oracle_resources(truth: &[GroundTruth]) -> Resources {
    resources_with(oracle_answer_key(truth), Some(truth_table(truth)))
}

pub fn corpus(seed: u64, n_docs: usize) -> (Vec<medex_core::docmodel::Document>, Vec<GroundTruth>) {
    generate_corpus(&CorpusSpec {
        seed,
        n_docs,
        ..CorpusSpec::default()
    })
    .unwrap()
}
