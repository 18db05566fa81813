use medex_core::anonymizer::{anonymize, verify_clean, SerialRegistry};
use medex_core::labelmodel::{featurize_document, predict, train, TrainingConfig};
use medex_core::lfkit::{build_label_matrix, majority_vote, GoldLabels, LfSet};
use medex_core::synthcorpus::{generate_corpus, CorpusSpec};
use medex_core::ClassLabel;

#[test]
fn trained_model_beats_majority_vote_and_masks_phi() {
    let (docs, truth) = generate_corpus(&CorpusSpec::default()).unwrap();
    let lfs = LfSet::default_set();
    let mut gold = GoldLabels::new();
    for gt in truth.iter().take(20) {
        for (i, l) in gt.labels.iter().enumerate() {
            gold.insert((gt.doc_id.clone(), i), *l);
        }
    }
    let matrix = build_label_matrix(&lfs, &docs, Some(&gold)).unwrap();
    let features: Vec<Vec<f64>> = docs.iter().flat_map(featurize_document).collect();
    let params = train(&matrix, &features, &TrainingConfig::default()).unwrap();

    let planted: Vec<ClassLabel> = truth.iter().flat_map(|g| g.labels.iter().copied()).collect();
    let mv_correct = matrix
        .rows()
        .iter()
        .zip(&planted)
        .filter(|(r, t)| majority_vote(r) == **t)
        .count();

    let mut model_correct = 0;
    let mut leaks = 0;
    let mut phi_total = 0;
    let mut reg = SerialRegistry::new();
    for (d, gt) in docs.iter().zip(&truth) {
        let pred = predict(&params, d, &lfs).unwrap();
        model_correct += pred.iter().zip(&gt.labels).filter(|(p, t)| p == t).count();
        let anon = anonymize(d, &pred, &mut reg).unwrap();
        leaks += verify_clean(&anon, &gt.phi_set()).leaks.len();
        phi_total += gt.phi_tokens.len();
    }
    let n = planted.len() as f64;
    let (acc_model, acc_mv) = (model_correct as f64 / n, mv_correct as f64 / n);
    let leak_rate = leaks as f64 / phi_total as f64;
    eprintln!("model acc {acc_model:.5}, majority {acc_mv:.5}, leaks {leaks}/{phi_total}");
    assert!(acc_model > acc_mv);
    assert!(leak_rate <= 0.01);
}

