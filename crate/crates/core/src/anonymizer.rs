//! Masking of predicted PHI tokens and the persistent patient-ID serial
//! registry.

use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{BBox, ClassLabel, DocError, Document, PageSize, Word};
use crate::lfkit::normalize_token;

pub const MASK: &str = "[REDACTED]";

/// `DS-` followed by the zero-padded serial.
pub fn serial_placeholder(serial: u64) -> String {
    format!("DS-{serial:06}")
}

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("{labels} labels for {tokens} tokens")]
    LabelLengthMismatch { labels: usize, tokens: usize },
    #[error("registry line {line}: {reason}")]
    CorruptRegistry { line: usize, reason: String },
    #[error("registry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Doc(#[from] DocError),
}

/// Injective patient-ID to serial map, serials handed out from 1 in
/// first-seen order.
#[derive(Debug, Clone, Default)]
pub struct SerialRegistry {
    map: HashMap<String, u64>,
    order: Vec<String>,
    persisted: usize,
    path: Option<PathBuf>,
}

impl SerialRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a registry file of `serial<TAB>patient_id` lines. A missing file
    /// is an empty registry that will be created on the first persist.
    pub fn open(path: &Path) -> Result<Self, AnonError> {
        let mut reg = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(reg),
            Err(e) => return Err(e.into()),
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let corrupt = |reason: &str| AnonError::CorruptRegistry {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (serial, id) = line.split_once('\t').ok_or_else(|| corrupt("missing tab"))?;
            let serial: u64 = serial.parse().map_err(|_| corrupt("serial is not an integer"))?;
            if serial != reg.next_serial() {
                return Err(corrupt("serials out of sequence"));
            }
            if reg.map.contains_key(id) {
                return Err(corrupt("patient id listed twice"));
            }
            reg.map.insert(id.to_string(), serial);
            reg.order.push(id.to_string());
        }
        reg.persisted = reg.order.len();
        Ok(reg)
    }

    pub fn get(&self, patient_id: &str) -> Option<u64> {
        self.map.get(patient_id).copied()
    }

    pub fn lookup_or_insert(&mut self, patient_id: &str) -> u64 {
        if let Some(s) = self.map.get(patient_id) {
            return *s;
        }
        let s = self.next_serial();
        self.map.insert(patient_id.to_string(), s);
        self.order.push(patient_id.to_string());
        s
    }

    pub fn next_serial(&self) -> u64 {
        self.order.len() as u64 + 1
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Entries in serial order.
    pub fn entries(&self) -> impl Iterator<Item = (u64, &str)> {
        self.order.iter().enumerate().map(|(i, id)| (i as u64 + 1, id.as_str()))
    }

    /// Appends entries added since the last persist to the backing file.
    pub fn persist(&mut self) -> Result<(), AnonError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if self.persisted == self.order.len() {
            return Ok(());
        }
        let mut buf = String::new();
        for (i, id) in self.order.iter().enumerate().skip(self.persisted) {
            buf.push_str(&format!("{}\t{}\n", i + 1, id));
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(buf.as_bytes())?;
        f.sync_all()?;
        self.persisted = self.order.len();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnonAction {
    Redacted,
    Serialized,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub token_id: usize,
    pub class: ClassLabel,
    pub action: AnonAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonToken {
    pub text: String,
    pub bbox: BBox,
    pub page: usize,
    /// Reading-order line of the source token.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizedDocument {
    pub doc_id: String,
    /// Serial of the first patient-ID run, if any.
    pub serial: Option<u64>,
    pub tokens: Vec<AnonToken>,
    pub audit: Vec<AuditEntry>,
    page_sizes: Vec<Option<PageSize>>,
}

impl AnonymizedDocument {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut prev_line = None;
        for t in &self.tokens {
            match prev_line {
                None => {}
                Some(l) if l == t.line => out.push(' '),
                Some(_) => out.push('\n'),
            }
            out.push_str(&t.text);
            prev_line = Some(t.line);
        }
        out
    }

    pub fn to_document(&self) -> Result<Document, AnonError> {
        let words = self
            .tokens
            .iter()
            .map(|t| Word {
                page: t.page,
                text: t.text.clone(),
                bbox: t.bbox,
            })
            .collect();
        Ok(Document::from_words(self.doc_id.clone(), self.page_sizes.clone(), words)?)
    }

    pub fn to_ocr_json(&self) -> Result<Vec<u8>, AnonError> {
        Ok(self.to_document()?.to_ocr_json())
    }
}

/// Masks NAME and LOCATION tokens, replaces each run of PATIENT_ID tokens by
/// one serial placeholder and keeps everything else verbatim.
pub fn anonymize(doc: &Document, labels: &[ClassLabel], reg: &mut SerialRegistry) -> Result<AnonymizedDocument, AnonError> {
    if labels.len() != doc.len() {
        return Err(AnonError::LabelLengthMismatch {
            labels: labels.len(),
            tokens: doc.len(),
        });
    }
    let toks = doc.tokens();
    let mut out = Vec::with_capacity(toks.len());
    let mut audit = Vec::new();
    let mut serial = None;
    let mut i = 0;
    while i < toks.len() {
        let t = &toks[i];
        let keep = |text: String| AnonToken {
            text,
            bbox: t.bbox,
            page: t.page,
            line: doc.line_of(i),
        };
        match labels[i] {
            ClassLabel::Other => {
                out.push(keep(t.text.clone()));
                i += 1;
            }
            c @ (ClassLabel::Name | ClassLabel::Location) => {
                out.push(keep(MASK.to_string()));
                audit.push(AuditEntry {
                    token_id: t.token_id,
                    class: c,
                    action: AnonAction::Redacted,
                });
                i += 1;
            }
            ClassLabel::PatientId => {
                let mut j = i;
                let mut key = String::new();
                while j < toks.len() && labels[j] == ClassLabel::PatientId {
                    key.push_str(&toks[j].text);
                    j += 1;
                }
                let s = reg.lookup_or_insert(&key);
                serial.get_or_insert(s);
                out.push(keep(serial_placeholder(s)));
                for (k, tk) in toks.iter().enumerate().take(j).skip(i) {
                    audit.push(AuditEntry {
                        token_id: tk.token_id,
                        class: ClassLabel::PatientId,
                        action: if k == i {
                            AnonAction::Serialized
                        } else {
                            AnonAction::Dropped
                        },
                    });
                }
                i = j;
            }
        }
    }
    Ok(AnonymizedDocument {
        doc_id: doc.doc_id().to_string(),
        serial,
        tokens: out,
        audit,
        page_sizes: doc.page_sizes().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    /// Position in the anonymized token list.
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub leaks: Vec<Leak>,
}

impl LeakReport {
    pub fn is_clean(&self) -> bool {
        self.leaks.is_empty()
    }
}

/// Surviving tokens whose normalized text is a known PHI string.
pub fn verify_clean(anon: &AnonymizedDocument, phi: &HashSet<String>) -> LeakReport {
    let phi: HashSet<String> = phi.iter().map(|p| normalize_token(p)).collect();
    LeakReport {
        leaks: anon
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| phi.contains(&normalize_token(&t.text)))
            .map(|(index, t)| Leak {
                index,
                text: t.text.clone(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::render_text;
    use ClassLabel::{Location as L, Name as N, Other as O, PatientId as P};

    fn doc(id: &str, words: &[&str]) -> Document {
        let words = words
            .iter()
            .enumerate()
            .map(|(i, w)| Word {
                page: 0,
                text: w.to_string(),
                bbox: BBox::new(0.05 + 0.1 * i as f64, 0.1, 0.1 + 0.1 * i as f64, 0.12).unwrap(),
            })
            .collect();
        Document::from_words(id, vec![None], words).unwrap()
    }

    #[test]
    fn all_other_is_identity() {
        let d = doc("d", &["Name:", "John", "Doe"]);
        let a = anonymize(&d, &[O, O, O], &mut SerialRegistry::new()).unwrap();
        assert_eq!(a.render_text(), render_text(&d));
        assert!(a.audit.is_empty());
        assert_eq!(a.serial, None);
    }

    #[test]
    fn names_masked() {
        let d = doc("d", &["John", "Doe"]);
        let a = anonymize(&d, &[N, N], &mut SerialRegistry::new()).unwrap();
        assert!(a.tokens.iter().all(|t| t.text == MASK));
        assert_eq!(a.audit.len(), 2);
    }

    #[test]
    fn serials_first_seen() {
        let mut reg = SerialRegistry::new();
        let a = anonymize(&doc("a", &["ID", "MRN9912"]), &[O, P], &mut reg).unwrap();
        let b = anonymize(&doc("b", &["MRN9912"]), &[P], &mut reg).unwrap();
        let c = anonymize(&doc("c", &["MRN0001", "x"]), &[P, O], &mut reg).unwrap();
        assert_eq!((a.serial, b.serial, c.serial), (Some(1), Some(1), Some(2)));
        assert_eq!(a.tokens[1].text, "DS-000001");
        assert_eq!(c.tokens[0].text, "DS-000002");
    }

    #[test]
    fn consecutive_ids_concatenate_and_drop() {
        let mut reg = SerialRegistry::new();
        let d = doc("d", &["MRN", "12", "34", "Dengue", "Pune"]);
        let a = anonymize(&d, &[P, P, P, O, L], &mut reg).unwrap();
        assert_eq!(reg.get("MRN1234"), Some(1));
        assert_eq!(a.tokens.len(), 3);
        assert_eq!(a.render_text(), "DS-000001 Dengue [REDACTED]");
        let actions: Vec<_> = a.audit.iter().map(|e| e.action).collect();
        assert_eq!(
            actions,
            vec![
                AnonAction::Serialized,
                AnonAction::Dropped,
                AnonAction::Dropped,
                AnonAction::Redacted
            ]
        );
    }

    #[test]
    fn length_mismatch() {
        let d = doc("d", &["a", "b"]);
        assert!(matches!(
            anonymize(&d, &[O], &mut SerialRegistry::new()),
            Err(AnonError::LabelLengthMismatch { labels: 1, tokens: 2 })
        ));
    }

    #[test]
    fn second_pass_changes_nothing() {
        let d = doc("d", &["Name:", "John", "MRN1", "Pune"]);
        let a = anonymize(&d, &[O, N, P, L], &mut SerialRegistry::new()).unwrap();
        let d2 = a.to_document().unwrap();
        let b = anonymize(&d2, &vec![O; d2.len()], &mut SerialRegistry::new()).unwrap();
        assert_eq!(b.render_text(), a.render_text());
        assert_eq!(b.to_ocr_json().unwrap(), a.to_ocr_json().unwrap());
    }

    #[test]
    fn leaks_detected() {
        let d = doc("d", &["John", "Doe", "Pune"]);
        let phi: HashSet<String> = ["John", "Doe", "Pune"].iter().map(|s| s.to_string()).collect();
        let clean = anonymize(&d, &[N, N, L], &mut SerialRegistry::new()).unwrap();
        assert!(verify_clean(&clean, &phi).is_clean());
        let leaky = anonymize(&d, &[N, O, L], &mut SerialRegistry::new()).unwrap();
        let r = verify_clean(&leaky, &phi);
        assert_eq!(r.leaks, vec![Leak { index: 1, text: "Doe".into() }]);
    }

    #[test]
    fn registry_persists_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("serials.tsv");
        let mut reg = SerialRegistry::open(&path).unwrap();
        reg.lookup_or_insert("MRN1");
        reg.lookup_or_insert("MRN2");
        reg.persist().unwrap();
        reg.lookup_or_insert("MRN1");
        reg.lookup_or_insert("MRN3");
        reg.persist().unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "1\tMRN1\n2\tMRN2\n3\tMRN3\n");
        let mut again = SerialRegistry::open(&path).unwrap();
        assert_eq!(again.lookup_or_insert("MRN2"), 2);
        assert_eq!(again.lookup_or_insert("MRN4"), 4);
    }

    #[test]
    fn corrupt_registry_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("serials.tsv");
        std::fs::write(&path, "1\tA\n3\tB\n").unwrap();
        assert!(matches!(
            SerialRegistry::open(&path),
            Err(AnonError::CorruptRegistry { line: 2, .. })
        ));
    }
}
