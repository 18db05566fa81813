use medex_core::anonymizer::{anonymize, SerialRegistry};
use medex_core::docmodel::render_text;
use medex_core::fieldex::{extract_record, records_from_csv, records_to_csv, HeadingConfig};
use medex_core::synthcorpus::{generate_corpus, CorpusSpec};

#[test]
fn fields_match_planted_values_on_raw_and_anonymized_text() {
    let (docs, truth) = generate_corpus(&CorpusSpec::default()).unwrap();
    let cfg = HeadingConfig::default();
    let mut reg = SerialRegistry::new();
    let mut mismatches = Vec::new();
    let mut records = Vec::new();
    for (d, gt) in docs.iter().zip(&truth) {
        let raw = extract_record(d.doc_id(), &render_text(d), &cfg);
        let anon = anonymize(d, &gt.labels, &mut reg).unwrap();
        let masked = extract_record(d.doc_id(), &anon.render_text(), &cfg);
        for (name, want) in &gt.fields {
            for (which, rec) in [("raw", &raw), ("anonymized", &masked)] {
                if rec.get(name) != Some(want.as_str()) {
                    mismatches.push(format!("{} {which} {name}: {:?} != {want:?}", gt.doc_id, rec.get(name)));
                }
            }
        }
        records.push(masked);
    }
    assert!(mismatches.is_empty(), "{} mismatches, first: {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]);

    let csv = records_to_csv(&records, &cfg);
    assert_eq!(records_from_csv(&csv, &cfg).unwrap(), records);
}

#[test]
fn custom_heading_config_round_trips_and_extracts() {
    let json = br#"{
        "fields": [
            {"name": "diagnosis", "headings": ["Impression"], "multi_valued": false},
            {"name": "plan", "headings": ["Plan"], "multi_valued": true}
        ],
        "stop_keywords": ["Signed"],
        "exclusion_phrases": []
    }"#;
    let cfg = HeadingConfig::from_json(json).unwrap();
    let back = HeadingConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back.field_names(), cfg.field_names());
    let rec = extract_record(
        "x",
        "Impression: viral   fever\nPlan: rest\nfluids; review\nSigned Dr A",
        &cfg,
    );
    assert_eq!(rec.get("diagnosis"), Some("viral fever"));
    assert_eq!(rec.get("plan"), Some("rest; fluids; review"));
}
