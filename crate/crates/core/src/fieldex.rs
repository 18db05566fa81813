//! Heading and stop-keyword extraction of the regular discharge-summary
//! fields from rendered text.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("field {0:?} has no heading patterns")]
    NoHeadings(String),
    #[error("config has no fields")]
    NoFields,
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    /// Literal heading phrases, matched case-insensitively on word boundaries.
    pub headings: Vec<String>,
    #[serde(default)]
    pub multi_valued: bool,
}

/// Wire form of a heading configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadingSpec {
    pub fields: Vec<FieldSpec>,
    /// Extra stop keywords beyond the field headings.
    #[serde(default)]
    pub stop_keywords: Vec<String>,
    #[serde(default)]
    pub exclusion_phrases: Vec<String>,
}

/// A validated heading configuration with compiled patterns.
#[derive(Debug, Clone)]
pub struct HeadingConfig {
    spec: HeadingSpec,
    field_patterns: Vec<Regex>,
    stop_pattern: Regex,
    stop_keywords: Vec<String>,
    exclusions: Vec<String>,
}

fn alternation(phrases: &[String]) -> Result<Regex, FieldError> {
    let mut sorted: Vec<&String> = phrases.iter().collect();
    // longest first so "Final Diagnosis" wins over "Diagnosis"
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let body = sorted
        .iter()
        .map(|p| {
            p.split_whitespace()
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"[ \t]+")
        })
        .collect::<Vec<_>>()
        .join("|");
    RegexBuilder::new(&format!(r"\b(?:{body})\b"))
        .case_insensitive(true)
        .build()
        .map_err(|e| FieldError::Config(e.to_string()))
}

impl HeadingConfig {
    pub fn new(spec: HeadingSpec) -> Result<Self, FieldError> {
        if spec.fields.is_empty() {
            return Err(FieldError::NoFields);
        }
        let mut seen = HashSet::new();
        let mut field_patterns = Vec::with_capacity(spec.fields.len());
        let mut stop_keywords: Vec<String> = Vec::new();
        for f in &spec.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(FieldError::DuplicateField(f.name.clone()));
            }
            if f.headings.iter().all(|h| h.trim().is_empty()) {
                return Err(FieldError::NoHeadings(f.name.clone()));
            }
            let heads: Vec<String> = f.headings.iter().filter(|h| !h.trim().is_empty()).cloned().collect();
            field_patterns.push(alternation(&heads)?);
            stop_keywords.extend(heads);
        }
        stop_keywords.extend(spec.stop_keywords.iter().filter(|s| !s.trim().is_empty()).cloned());
        stop_keywords.sort();
        stop_keywords.dedup();
        let stop_pattern = alternation(&stop_keywords)?;
        let exclusions = spec.exclusion_phrases.iter().map(|p| p.to_lowercase()).collect();
        Ok(Self {
            spec,
            field_patterns,
            stop_pattern,
            stop_keywords,
            exclusions,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, FieldError> {
        let spec: HeadingSpec = serde_json::from_slice(bytes).map_err(|e| FieldError::Config(e.to_string()))?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.spec).expect("heading spec serializes")
    }

    pub fn spec(&self) -> &HeadingSpec {
        &self.spec
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.spec.fields
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.spec.fields.iter().map(|f| f.name.as_str()).collect()
    }

    /// Every heading pattern plus any extra stop keywords.
    pub fn stop_keywords(&self) -> &[String] {
        &self.stop_keywords
    }

    fn field_index(&self, name: &str) -> Option<usize> {
        self.spec.fields.iter().position(|f| f.name == name)
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn field(name: &str, headings: &[&str], multi_valued: bool) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        headings: strings(headings),
        multi_valued,
    }
}

impl Default for HeadingConfig {
    fn default() -> Self {
        Self::new(default_spec()).expect("default heading config is valid")
    }
}

pub fn default_spec() -> HeadingSpec {
    HeadingSpec {
        fields: vec![
            field("date_of_admission", &["Date of Admission", "Admission Date"], false),
            field("date_of_discharge", &["Date of Discharge", "Discharge Date"], false),
            field("diagnosis", &["Final Diagnosis", "Diagnosis"], false),
            field("chief_complaints", &["Chief Complaints", "Chief Complaint"], false),
            field("past_history", &["Past Medical History", "Past History"], false),
            field("significant_findings", &["Significant Findings"], false),
            field("investigations", &["Investigations"], false),
            field("course_in_hospital", &["Course in Hospital", "Hospital Course"], false),
            field(
                "medications_in_stay",
                &["Medications During Stay", "Medications Administered"],
                true,
            ),
            field(
                "medications_on_discharge",
                &["Medications on Discharge", "Discharge Medications"],
                true,
            ),
        ],
        stop_keywords: strings(&["Advice on Discharge", "Follow Up"]),
        exclusion_phrases: strings(&["patient id", "location"]),
    }
}

/// One extracted row: the configured fields in configured order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub doc_id: String,
    pub fields: Vec<(String, String)>,
}

impl ExtractionRecord {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(_, v)| v.as_str())
    }
}

/// Whether a heading match at `start..end` counts: at the start of a line,
/// right after a sentence end, or written in capitals.
fn anchored(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].trim_end_matches([' ', '\t']);
    match before.chars().next_back() {
        None | Some('\n') | Some('.') | Some('!') | Some('?') => return true,
        _ => {}
    }
    let m = &text[start..end];
    m.chars().any(char::is_alphabetic) && !m.chars().any(char::is_lowercase)
}

fn next_anchored(re: &Regex, text: &str, mut from: usize) -> Option<(usize, usize)> {
    while from <= text.len() {
        let m = re.find_at(text, from)?;
        if anchored(text, m.start(), m.end()) {
            return Some((m.start(), m.end()));
        }
        // step one character past the rejected start
        from = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_segment(raw: &str) -> &str {
    raw.trim_start_matches(|c: char| c.is_whitespace() || c == ':' || c == '-')
        .trim_end()
}

/// Raw per-field value lists for `text`. Single-valued fields yield at most
/// one element; multi-valued fields one element per line or `;` item.
pub fn extract_raw(text: &str, cfg: &HeadingConfig) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    for (f, re) in cfg.spec.fields.iter().zip(&cfg.field_patterns) {
        let Some((_, h_end)) = next_anchored(re, text, 0) else {
            out.insert(f.name.clone(), Vec::new());
            continue;
        };
        let v_end = next_anchored(&cfg.stop_pattern, text, h_end).map_or(text.len(), |(s, _)| s);
        let body = clean_segment(&text[h_end..v_end]);
        let kept: Vec<&str> = body
            .lines()
            .filter(|l| {
                let low = l.to_lowercase();
                !cfg.exclusions.iter().any(|x| low.contains(x.as_str()))
            })
            .collect();
        let values = if f.multi_valued {
            kept.iter()
                .flat_map(|l| l.split(';'))
                .map(collapse_ws)
                .filter(|s| !s.is_empty())
                .collect()
        } else {
            let joined = collapse_ws(&kept.join(" "));
            if joined.is_empty() {
                Vec::new()
            } else {
                vec![joined]
            }
        };
        out.insert(f.name.clone(), values);
    }
    out
}

/// Extracts every configured field; missing headings give empty strings.
pub fn extract_fields(text: &str, cfg: &HeadingConfig) -> ExtractionRecord {
    extract_record("", text, cfg)
}

pub fn extract_record(doc_id: &str, text: &str, cfg: &HeadingConfig) -> ExtractionRecord {
    normalize_record(doc_id, extract_raw(text, cfg), cfg).expect("raw map uses configured names")
}

/// Joins multi-valued lists with `"; "`, takes the first element of
/// single-valued lists, and fills absent fields with `""`.
pub fn normalize_record(
    doc_id: &str,
    raw: BTreeMap<String, Vec<String>>,
    cfg: &HeadingConfig,
) -> Result<ExtractionRecord, FieldError> {
    if let Some(k) = raw.keys().find(|k| cfg.field_index(k).is_none()) {
        return Err(FieldError::UnknownField(k.clone()));
    }
    let fields = cfg
        .spec
        .fields
        .iter()
        .map(|f| {
            let vals = raw.get(&f.name).map(Vec::as_slice).unwrap_or(&[]);
            let v = if f.multi_valued {
                vals.join("; ")
            } else {
                vals.first().cloned().unwrap_or_default()
            };
            (f.name.clone(), v)
        })
        .collect();
    Ok(ExtractionRecord {
        doc_id: doc_id.to_string(),
        fields,
    })
}

/// RFC 4180 CSV with a `doc_id` column followed by the configured fields.
pub fn records_to_csv(records: &[ExtractionRecord], cfg: &HeadingConfig) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let mut header = vec!["doc_id"];
    header.extend(cfg.field_names());
    w.write_record(&header).expect("write to vec");
    for r in records {
        let mut row = vec![r.doc_id.as_str()];
        row.extend(r.values());
        w.write_record(&row).expect("write to vec");
    }
    w.into_inner().expect("flush vec")
}

pub fn records_from_csv(bytes: &[u8], cfg: &HeadingConfig) -> Result<Vec<ExtractionRecord>, FieldError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(|e| FieldError::Csv(e.to_string()))?.clone();
    let mut expected = vec!["doc_id"];
    expected.extend(cfg.field_names());
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(FieldError::Csv(format!("unexpected header {header:?}")));
    }
    let names = cfg.field_names();
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| FieldError::Csv(e.to_string()))?;
            Ok(ExtractionRecord {
                doc_id: rec[0].to_string(),
                fields: names
                    .iter()
                    .zip(rec.iter().skip(1))
                    .map(|(n, v)| (n.to_string(), v.to_string()))
                    .collect(),
            })
        })
        .collect()
}
