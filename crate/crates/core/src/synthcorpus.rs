//! Synthetic discharge summaries in the standard layout, with planted PHI,
//! field values and course-in-hospital feature flags.
//!
//! Pages are a monospaced grid of 100 columns by 70 rows. The header block
//! (title, name, patient ID, location, department) sits in the top 15% of
//! page 1; body sections start at row 11 on every page.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{BBox, ClassLabel, Document, PageSize, Word};
use crate::evalkit::YesNo;
use crate::fieldex::{records_to_csv, ExtractionRecord, HeadingConfig};
use crate::promptex::{format_answers, AnswerKeyTransport, ScriptedTransport, FEATURE_KEYS};

pub const N_FEATURES: usize = 12;

pub const FIRST_NAMES: [&str; 24] = [
    "Arvelin", "Baskor", "Cyndrel", "Davoni", "Elmarek", "Farisha", "Gorvath", "Hesperin", "Ilvana", "Joravik",
    "Kestrin", "Lumira", "Morvana", "Nerith", "Orvelle", "Pashmir", "Quorin", "Rasketh", "Sylvane", "Tarvish",
    "Ulmira", "Veskor", "Wendrin", "Yaravel",
];

pub const SURNAMES: [&str; 24] = [
    "Bhadrakar", "Chalvani", "Dervekar", "Eshwarin", "Galvorkar", "Haldemir", "Jhunvala", "Kormatri", "Lavendrin",
    "Mehrivar", "Nandekor", "Orvashi", "Parvekar", "Quelsari", "Rashvani", "Sundrekar", "Talmorin", "Umbarkar",
    "Valdresi", "Wadhekar", "Yelvanti", "Zorvekar", "Ambrevi", "Brelvani",
];

pub const CITIES: [&str; 12] = [
    "Korvapur", "Meldrabad", "Navrangi", "Ostavali", "Pelmora", "Rantangar", "Sarvelgaon", "Tulvershi", "Velanpur",
    "Zandragiri", "Amberkot", "Bhelgaon",
];

pub const LOCALITIES: [&str; 10] = [
    "Ashvel", "Bramholi", "Chenvari", "Dorvik", "Elvashi", "Fenwari", "Gavrani", "Hinjoli", "Istavan", "Jendra",
];

const DEPARTMENTS: [&str; 4] = ["General Medicine", "Internal Medicine", "General Surgery", "Cardiology"];

/// Paraphrases per feature, in question order. Vocabulary is disjoint across
/// features.
const FEATURE_SENTENCES: [[&str; 3]; N_FEATURES] = [
    [
        "Nephrology opinion was sought for deranged renal parameters.",
        "Patient was reviewed by the nephrologist.",
        "Renal physician consultation was obtained.",
    ],
    [
        "Creatinine rose sharply suggesting acute kidney injury.",
        "Developed AKI on day two.",
        "Serum creatinine doubled consistent with acute kidney injury.",
    ],
    [
        "Surgery was performed under general anaesthesia.",
        "Procedure done under GA without complications.",
        "Underwent laparoscopic repair under general anaesthesia.",
    ],
    [
        "Known case of hypertension on regular treatment.",
        "Background history of high blood pressure for six years.",
        "A known hypertensive on amlodipine.",
    ],
    [
        "Advised fluid restriction to one and a half litres per day.",
        "Asked to limit daily fluid intake.",
        "Oral fluids restricted to one litre daily.",
    ],
    [
        "Coronary angiography revealed a blocked artery.",
        "CAG showed double vessel disease.",
        "Angiogram of the left leg showed narrowing.",
    ],
    [
        "Started on furosemide.",
        "Received intravenous torsemide.",
        "Diuretic therapy with frusemide was initiated.",
    ],
    [
        "Contrast enhanced CT abdomen was done.",
        "CECT chest was taken.",
        "MRI with gadolinium contrast was acquired.",
    ],
    [
        "Shifted to the ICU for monitoring.",
        "Required intensive care unit admission.",
        "Managed in the critical care unit for two days.",
    ],
    [
        "Put on mechanical ventilation.",
        "Was placed on a ventilator.",
        "Needed ventilatory support for 48 hours.",
    ],
    [
        "Tachycardia with heart rate of 130 was recorded.",
        "Heart rate remained above 120 per minute.",
        "Sinus tachycardia was noted.",
    ],
    [
        "Oxygen saturation dropped to 86 percent.",
        "SpO2 fell to 88 percent on room air.",
        "Had episodes of desaturation.",
    ],
];

const FILLERS: [&str; 8] = [
    "The patient was managed conservatively.",
    "Vitals were monitored closely.",
    "Symptoms improved gradually.",
    "Was started on oral feeds.",
    "Remained afebrile through the stay.",
    "General condition improved.",
    "Antibiotics were given as per culture report.",
    "Was ambulatory at the time of release.",
];

const DIAGNOSES: [&str; 10] = [
    "Community acquired pneumonia",
    "Acute gastroenteritis with dehydration",
    "Dengue fever with thrombocytopenia",
    "Urinary tract infection",
    "Acute pancreatitis",
    "Cellulitis of left leg",
    "Diabetic ketoacidosis",
    "Acute exacerbation of COPD",
    "Chronic kidney disease stage 4",
    "Enteric fever",
];

const COMPLAINTS: [&str; 8] = [
    "Fever for 3 days",
    "Breathlessness on exertion",
    "Abdominal pain",
    "Vomiting",
    "Cough with expectoration",
    "Burning micturition",
    "Swelling of both legs",
    "Chest pain",
];

const PAST: [&str; 6] = [
    "Type 2 diabetes mellitus for 10 years",
    "Bronchial asthma",
    "Hypothyroidism on replacement",
    "Nil significant",
    "Old pulmonary tuberculosis, treated",
    "Coronary artery disease",
];

const FINDINGS: [&str; 6] = [
    "Pallor present, no icterus",
    "Bilateral basal crepitations",
    "Tenderness in the epigastrium",
    "Pedal edema present",
    "Dry tongue and sunken eyes",
    "Hepatomegaly of 2 cm",
];

const TESTS: [&str; 6] = [
    "Hb 10.2 g/dL, TLC 12000/cumm, Platelets 1.1 lakh/cumm",
    "Serum creatinine 1.4 mg/dL",
    "Chest X-ray showed right lower zone consolidation",
    "Urine routine showed plenty of pus cells",
    "Ultrasound abdomen was normal",
    "HbA1c 9.1 percent",
];

const MEDS_STAY: [&str; 6] = [
    "Inj Ceftriaxone 1 g IV BD",
    "Inj Pantoprazole 40 mg IV OD",
    "Inj Paracetamol 1 g IV SOS",
    "Tab Doxycycline 100 mg BD",
    "Inj Insulin as per sliding scale",
    "IV fluids RL 100 ml/hr",
];

const MEDS_HOME: [&str; 6] = [
    "Tab Cefixime 200 mg BD x 5 days",
    "Tab Pantoprazole 40 mg OD before breakfast",
    "Tab Paracetamol 650 mg SOS",
    "Syp Lactulose 15 ml HS",
    "Tab Metformin 500 mg BD",
    "Tab Vitamin D3 60000 IU weekly",
];

/// A4 at 150 dpi.
pub const PAGE_SIZE: PageSize = PageSize {
    width_px: 1240.0,
    height_px: 1754.0,
};

const COLS: usize = 100;
const ROWS: usize = 70;
const LEFT: usize = 5;
const WRAP: usize = 90;
const BODY_FIRST_ROW: usize = 11;
const BODY_LAST_ROW: usize = 66;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_docs: usize,
    /// Expected PHI tokens per document, clamped to [4, 6].
    pub phi_density: f64,
    /// Per-question YES rate among documents with a course section.
    pub feature_prevalence: Vec<f64>,
    pub empty_course_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 200,
            phi_density: 5.0,
            feature_prevalence: vec![0.2, 0.35, 0.3, 0.4, 0.15, 0.2, 0.3, 0.25, 0.35, 0.15, 0.2, 0.25],
            empty_course_rate: 0.06,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_docs == 0 {
            return Err("n_docs must be >= 1".into());
        }
        if self.feature_prevalence.len() != N_FEATURES {
            return Err(format!("feature_prevalence needs {N_FEATURES} entries"));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !self.feature_prevalence.iter().all(|&p| prob(p)) || !prob(self.empty_course_rate) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        if !self.phi_density.is_finite() {
            return Err("phi_density must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub doc_id: String,
    /// One label per document token, in reading order.
    pub labels: Vec<ClassLabel>,
    /// Planted values per default heading field, multi-valued lists joined by "; ".
    pub fields: Vec<(String, String)>,
    pub flags: [bool; N_FEATURES],
    pub patient_id: String,
    /// Text of every planted PHI token.
    pub phi_tokens: Vec<String>,
}

impl GroundTruth {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    pub fn course_is_empty(&self) -> bool {
        self.field("course_in_hospital").is_none_or(str::is_empty)
    }

    pub fn phi_set(&self) -> HashSet<String> {
        self.phi_tokens.iter().cloned().collect()
    }

    pub fn record(&self) -> ExtractionRecord {
        ExtractionRecord {
            doc_id: self.doc_id.clone(),
            fields: self.fields.clone(),
        }
    }
}

/// Answers a perfect reader would give: the planted flags.
pub fn oracle_answers(gt: &GroundTruth) -> Vec<YesNo> {
    gt.flags.iter().map(|&f| YesNo::from_bool(f)).collect()
}

pub fn oracle_response(gt: &GroundTruth) -> String {
    format_answers(&oracle_answers(gt))
}

/// Mock transport scripted with each document's oracle response.
pub fn oracle_transport(truth: &[GroundTruth]) -> ScriptedTransport {
    let mut t = ScriptedTransport::new();
    for gt in truth {
        t.insert(gt.doc_id.clone(), oracle_response(gt));
    }
    t
}

/// Answer-key mock holding each document's planted flags.
pub fn oracle_answer_key(truth: &[GroundTruth]) -> AnswerKeyTransport {
    let mut t = AnswerKeyTransport::new();
    for gt in truth {
        t.insert(gt.doc_id.clone(), oracle_answers(gt));
    }
    t
}

type Line = Vec<(String, ClassLabel)>;

fn words(text: &str) -> impl Iterator<Item = (String, ClassLabel)> + '_ {
    text.split_whitespace().map(|w| (w.to_string(), ClassLabel::Other))
}

/// Greedy wrap of `prefix` followed by `text` into lines of at most WRAP chars.
fn wrap(prefix: &str, text: &str) -> Vec<Line> {
    let mut lines = Vec::new();
    let mut cur: Line = Vec::new();
    let mut width = 0;
    for w in words(prefix).chain(words(text)) {
        let need = if cur.is_empty() { w.0.len() } else { width + 1 + w.0.len() };
        if need > WRAP && !cur.is_empty() {
            lines.push(std::mem::take(&mut cur));
            width = w.0.len();
        } else {
            width = need;
        }
        cur.push(w);
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}

fn pick_some<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], lo: usize, hi: usize) -> Vec<&'a str> {
    let k = rng.random_range(lo..=hi);
    let mut v: Vec<&str> = pool.choose_multiple(rng, k).copied().collect();
    v.sort_by_key(|s| pool.iter().position(|p| p == s));
    v
}

fn date_from_ordinal(day: u32) -> (u32, u32) {
    const LEN: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut d = day;
    for (m, len) in LEN.iter().enumerate() {
        if d < *len {
            return (d + 1, m as u32 + 1);
        }
        d -= len;
    }
    (31, 12)
}

fn fmt_date(ordinal: u32) -> String {
    let (d, m) = date_from_ordinal(ordinal);
    format!("{d:02}/{m:02}/2023")
}

struct DocPlan {
    flags: [bool; N_FEATURES],
    empty_course: bool,
    seed: u64,
}

fn heading(caps: bool, title: &str) -> String {
    if caps {
        title.to_uppercase()
    } else {
        title.to_string()
    }
}

fn build_doc(doc_id: String, plan: &DocPlan, phi_density: f64) -> (Document, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let caps = rng.random_bool(0.3);
    let extra_p = ((phi_density.clamp(4.0, 6.0) - 4.0) / 2.0).clamp(0.0, 1.0);

    let first = *FIRST_NAMES.choose(&mut rng).expect("non-empty");
    let middle = rng
        .random_bool(extra_p)
        .then(|| *FIRST_NAMES.choose(&mut rng).expect("non-empty"));
    let last = *SURNAMES.choose(&mut rng).expect("non-empty");
    let patient_id = format!("MRN{:06}", rng.random_range(0..1_000_000u32));
    let locality = rng
        .random_bool(extra_p)
        .then(|| *LOCALITIES.choose(&mut rng).expect("non-empty"));
    let city = *CITIES.choose(&mut rng).expect("non-empty");
    let dept = *DEPARTMENTS.choose(&mut rng).expect("non-empty");

    let o = |s: &str| (s.to_string(), ClassLabel::Other);
    let mut header: Vec<(usize, Line)> = Vec::new();
    header.push((1, vec![o("DISCHARGE"), o("SUMMARY")]));
    let mut name_line = vec![o("Name:"), (first.to_string(), ClassLabel::Name)];
    if let Some(m) = middle {
        name_line.push((m.to_string(), ClassLabel::Name));
    }
    name_line.push((last.to_string(), ClassLabel::Name));
    header.push((3, name_line));
    header.push((4, vec![o("Patient"), o("ID:"), (patient_id.clone(), ClassLabel::PatientId)]));
    let mut loc_line = vec![o("Location:")];
    if let Some(l) = locality {
        loc_line.push((l.to_string(), ClassLabel::Location));
    }
    loc_line.push((city.to_string(), ClassLabel::Location));
    header.push((5, loc_line));
    let mut dept_line = vec![o("Department"), o("of")];
    dept_line.extend(words(dept));
    header.push((7, dept_line));

    let admit = rng.random_range(0..340u32);
    let discharge = admit + rng.random_range(2..=12u32);
    let diagnosis = *DIAGNOSES.choose(&mut rng).expect("non-empty");
    let complaints = pick_some(&mut rng, &COMPLAINTS, 1, 3).join(", ");
    let past = *PAST.choose(&mut rng).expect("non-empty");
    let findings = pick_some(&mut rng, &FINDINGS, 1, 2).join(", ");
    let tests = pick_some(&mut rng, &TESTS, 1, 3).join(", ");
    let meds_stay = pick_some(&mut rng, &MEDS_STAY, 2, 4);
    let meds_home = pick_some(&mut rng, &MEDS_HOME, 1, 4);

    let course = if plan.empty_course {
        String::new()
    } else {
        let mut sentences: Vec<&str> = pick_some(&mut rng, &FILLERS, 2, 4);
        for (q, on) in plan.flags.iter().enumerate() {
            if *on {
                sentences.push(FEATURE_SENTENCES[q].choose(&mut rng).expect("non-empty"));
            }
        }
        sentences.shuffle(&mut rng);
        sentences.join(" ")
    };

    let adm_head = if rng.random_bool(0.5) { "Date of Admission:" } else { "Admission Date:" };
    let dis_head = if rng.random_bool(0.5) { "Date of Discharge:" } else { "Discharge Date:" };
    let dx_head = if rng.random_bool(0.5) { "Diagnosis:" } else { "Final Diagnosis:" };

    let mut body: Vec<Line> = Vec::new();
    body.extend(wrap(&heading(caps, adm_head), &fmt_date(admit)));
    body.extend(wrap(&heading(caps, dis_head), &fmt_date(discharge)));
    body.extend(wrap(&heading(caps, dx_head), diagnosis));
    body.extend(wrap(&heading(caps, "Chief Complaints:"), &complaints));
    body.extend(wrap(&heading(caps, "Past History:"), past));
    body.extend(wrap(&heading(caps, "Significant Findings:"), &findings));
    body.extend(wrap(&heading(caps, "Investigations:"), &tests));
    body.extend(wrap(&heading(caps, "Course in Hospital"), ""));
    body.extend(wrap("", &course));
    body.extend(wrap(&heading(caps, "Medications During Stay"), ""));
    for m in &meds_stay {
        body.extend(wrap("", m));
    }
    body.extend(wrap(&heading(caps, "Medications on Discharge"), ""));
    for m in &meds_home {
        body.extend(wrap("", m));
    }

    let mut placed: Vec<(usize, usize, Line)> = header.into_iter().map(|(r, l)| (0, r, l)).collect();
    let (mut page, mut row) = (0, BODY_FIRST_ROW);
    for line in body {
        if row > BODY_LAST_ROW {
            page += 1;
            row = BODY_FIRST_ROW;
        }
        placed.push((page, row, line));
        row += 1;
    }

    let mut ws = Vec::new();
    let mut labels = Vec::new();
    for (page, row, line) in placed {
        let y0 = (row as f64 + 0.15) / ROWS as f64;
        let y1 = (row as f64 + 0.85) / ROWS as f64;
        let mut col = LEFT;
        for (text, label) in line {
            let x0 = col as f64 / COLS as f64;
            let x1 = (col + text.chars().count()) as f64 / COLS as f64;
            col += text.chars().count() + 1;
            ws.push(Word {
                page,
                text,
                bbox: BBox::new(x0, y0, x1, y1).expect("grid box in range"),
            });
            labels.push(label);
        }
    }
    let texts: Vec<String> = ws.iter().map(|w| w.text.clone()).collect();
    let phi_tokens: Vec<String> = ws
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l != ClassLabel::Other)
        .map(|(w, _)| w.text.clone())
        .collect();
    let doc = Document::from_words(doc_id.clone(), vec![Some(PAGE_SIZE); page + 1], ws).expect("generated document is valid");
    assert!(
        doc.tokens().iter().map(|t| &t.text).eq(texts.iter()),
        "layout order must equal reading order"
    );

    let fields = vec![
        ("date_of_admission", fmt_date(admit)),
        ("date_of_discharge", fmt_date(discharge)),
        ("diagnosis", diagnosis.to_string()),
        ("chief_complaints", complaints),
        ("past_history", past.to_string()),
        ("significant_findings", findings),
        ("investigations", tests),
        ("course_in_hospital", course),
        ("medications_in_stay", meds_stay.join("; ")),
        ("medications_on_discharge", meds_home.join("; ")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let gt = GroundTruth {
        doc_id,
        labels,
        fields,
        flags: plan.flags,
        patient_id,
        phi_tokens,
    };
    (doc, gt)
}

fn quota(rng: &mut ChaCha8Rng, pool: &[usize], rate: f64) -> HashSet<usize> {
    let k = (rate * pool.len() as f64).round() as usize;
    let mut v = pool.to_vec();
    v.shuffle(rng);
    v.into_iter().take(k).collect()
}

/// Generates `spec.n_docs` documents and their ground truth. Empty-course
/// documents and each feature's YES documents are exact quotas
/// (rate times population, rounded), placed by a seeded shuffle.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<Document>, Vec<GroundTruth>), String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (0..spec.n_docs).collect();
    let empty = quota(&mut rng, &all, spec.empty_course_rate);
    let eligible: Vec<usize> = all.iter().copied().filter(|i| !empty.contains(i)).collect();
    let mut flags = vec![[false; N_FEATURES]; spec.n_docs];
    for (q, &p) in spec.feature_prevalence.iter().enumerate() {
        for i in quota(&mut rng, &eligible, p) {
            flags[i][q] = true;
        }
    }
    let plans: Vec<DocPlan> = (0..spec.n_docs)
        .map(|i| DocPlan {
            flags: flags[i],
            empty_course: empty.contains(&i),
            seed: rng.random(),
        })
        .collect();
    Ok(plans
        .iter()
        .enumerate()
        .map(|(i, plan)| build_doc(format!("dsum_{:05}", i + 1), plan, spec.phi_density))
        .unzip())
}

/// Four kinds of broken OCR-JSON built from a valid payload, cycling on `kind`:
/// truncated JSON, a three-number bbox, no pages, and an inverted bbox.
pub fn malformed_payload(valid: &[u8], kind: usize) -> Vec<u8> {
    let mut v: serde_json::Value = serde_json::from_slice(valid).expect("valid payload");
    match kind % 4 {
        0 => return valid[..valid.len() / 2].to_vec(),
        1 => v["pages"][0]["words"][0]["bbox"] = serde_json::json!([0.1, 0.1, 0.2]),
        2 => v["pages"] = serde_json::json!([]),
        _ => v["pages"][0]["words"][0]["bbox"] = serde_json::json!([0.6, 0.1, 0.5, 0.12]),
    }
    serde_json::to_vec(&v).expect("json serializes")
}

/// `doc_id,token_id,text,label` for every token.
pub fn labels_csv(docs: &[Document], truth: &[GroundTruth]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["doc_id", "token_id", "text", "label"]).expect("write to vec");
    for (d, gt) in docs.iter().zip(truth) {
        for (t, l) in d.tokens().iter().zip(&gt.labels) {
            w.write_record([d.doc_id(), &t.token_id.to_string(), &t.text, l.as_str()])
                .expect("write to vec");
        }
    }
    w.into_inner().expect("flush vec")
}

pub fn fields_csv(truth: &[GroundTruth]) -> Vec<u8> {
    let records: Vec<ExtractionRecord> = truth.iter().map(GroundTruth::record).collect();
    records_to_csv(&records, &HeadingConfig::default())
}

/// `doc_id` plus one YES/NO column per feature.
pub fn flags_csv(truth: &[GroundTruth]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["doc_id"];
    header.extend(FEATURE_KEYS);
    w.write_record(&header).expect("write to vec");
    for gt in truth {
        let mut row = vec![gt.doc_id.clone()];
        row.extend(oracle_answers(gt).iter().map(|a| a.to_string()));
        w.write_record(&row).expect("write to vec");
    }
    w.into_inner().expect("flush vec")
}

/// Two agreeing raters per (doc, feature) cell, both equal to the planted flag.
pub fn annotations_csv(truth: &[GroundTruth]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["doc_id", "feature", "rater1", "rater2", "adjudicated"])
        .expect("write to vec");
    for gt in truth {
        for (k, a) in FEATURE_KEYS.iter().zip(oracle_answers(gt)) {
            w.write_record([gt.doc_id.as_str(), k, a.as_str(), a.as_str(), ""])
                .expect("write to vec");
        }
    }
    w.into_inner().expect("flush vec")
}
