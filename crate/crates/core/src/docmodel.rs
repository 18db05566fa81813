//! Tokenized document model and OCR-JSON ingestion.
//!
//! An OCR export is a list of pages, each holding words with a bounding box.
//! [`parse_ocr_document`] validates the payload, converts pixel coordinates to
//! page fractions when page dimensions are given, and sorts words into a
//! canonical reading order: words are grouped into lines by vertical overlap,
//! lines are ordered top to bottom, and words within a line left to right.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while ingesting an OCR payload.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DocError {
    #[error("malformed OCR payload: {0}")]
    MalformedPayload(String),
    #[error("document `{0}` contains no tokens")]
    EmptyDocument(String),
    #[error("invalid bounding box on token {index}: {reason}")]
    BadBBox { index: usize, reason: String },
}

/// Axis-aligned box in page-fraction coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, String> {
        let all = [x0, y0, x1, y1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("coordinates {all:?} outside [0, 1]"));
        }
        if x0 >= x1 {
            return Err(format!("x0 {x0} must be < x1 {x1}"));
        }
        if y0 >= y1 {
            return Err(format!("y0 {y0} must be < y1 {y1}"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Inclusive point containment.
    pub fn contains_point(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// True when the vertical intervals overlap by at least half of the
    /// smaller of the two heights.
    pub fn shares_line_with(&self, other: &BBox) -> bool {
        let overlap = self.y1.min(other.y1) - self.y0.max(other.y0);
        overlap >= 0.5 * self.height().min(other.height())
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// The four token classes. `Other` is the only class kept verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassLabel {
    Name,
    PatientId,
    Location,
    Other,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Name,
        ClassLabel::PatientId,
        ClassLabel::Location,
        ClassLabel::Other,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_masked(self) -> bool {
        self != ClassLabel::Other
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Name => "NAME",
            ClassLabel::PatientId => "PATIENT_ID",
            ClassLabel::Location => "LOCATION",
            ClassLabel::Other => "OTHER",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NAME" => Ok(ClassLabel::Name),
            "PATIENT_ID" => Ok(ClassLabel::PatientId),
            "LOCATION" => Ok(ClassLabel::Location),
            "OTHER" => Ok(ClassLabel::Other),
            other => Err(format!("unknown class label `{other}`")),
        }
    }
}

/// One OCR word.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    pub page: usize,
    pub token_id: usize,
}

/// Page dimensions in pixels, when the OCR export reported them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageSize {
    pub width_px: f64,
    pub height_px: f64,
}

/// A word before reading-order assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub page: usize,
    pub text: String,
    pub bbox: BBox,
}

/// An immutable tokenized document in canonical reading order.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    doc_id: String,
    page_sizes: Vec<Option<PageSize>>,
    tokens: Vec<Token>,
    lines: Vec<Range<usize>>,
    line_of: Vec<usize>,
}

impl Document {
    /// Builds a document from words in any order. Token ids are assigned in
    /// reading order.
    pub fn from_words(
        doc_id: impl Into<String>,
        page_sizes: Vec<Option<PageSize>>,
        words: Vec<Word>,
    ) -> Result<Self, DocError> {
        let doc_id = doc_id.into();
        if page_sizes.is_empty() {
            return Err(DocError::EmptyDocument(doc_id));
        }
        for (i, w) in words.iter().enumerate() {
            if w.page >= page_sizes.len() {
                return Err(DocError::MalformedPayload(format!(
                    "word {i} references page {} of {}",
                    w.page,
                    page_sizes.len()
                )));
            }
            check_text(i, &w.text)?;
        }
        if words.is_empty() {
            return Err(DocError::EmptyDocument(doc_id));
        }

        let (order, line_ids) = reading_order(&words);
        let mut tokens = Vec::with_capacity(words.len());
        let mut line_of = Vec::with_capacity(words.len());
        let mut slots: Vec<Option<Word>> = words.into_iter().map(Some).collect();
        for (token_id, (&src, &line)) in order.iter().zip(&line_ids).enumerate() {
            let w = slots[src].take().expect("each word placed once");
            tokens.push(Token {
                text: w.text,
                bbox: w.bbox,
                page: w.page,
                token_id,
            });
            line_of.push(line);
        }
        let lines = line_ranges(&line_of);
        Ok(Self {
            doc_id,
            page_sizes,
            tokens,
            lines,
            line_of,
        })
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn page_count(&self) -> usize {
        self.page_sizes.len()
    }

    pub fn page_sizes(&self) -> &[Option<PageSize>] {
        &self.page_sizes
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token index ranges, one per visual line, in reading order.
    pub fn lines(&self) -> &[Range<usize>] {
        &self.lines
    }

    /// Line index of the token at position `i`.
    pub fn line_of(&self, i: usize) -> usize {
        self.line_of[i]
    }

    /// Serializes back to OCR-JSON with normalized coordinates.
    pub fn to_ocr_json(&self) -> Vec<u8> {
        let mut pages: Vec<OcrPage> = self
            .page_sizes
            .iter()
            .map(|s| OcrPage {
                width_px: s.map(|s| s.width_px),
                height_px: s.map(|s| s.height_px),
                words: Vec::new(),
            })
            .collect();
        for t in &self.tokens {
            pages[t.page].words.push(OcrWord {
                text: t.text.clone(),
                bbox: t.bbox.into(),
            });
        }
        let payload = OcrPayload {
            doc_id: self.doc_id.clone(),
            pages,
        };
        serde_json::to_vec(&payload).expect("OCR payload serializes")
    }
}

fn check_text(index: usize, text: &str) -> Result<(), DocError> {
    if text.is_empty() {
        return Err(DocError::MalformedPayload(format!("word {index} has empty text")));
    }
    if text.contains(['\n', '\r', '\u{2028}', '\u{2029}']) {
        return Err(DocError::MalformedPayload(format!(
            "word {index} contains a line break"
        )));
    }
    Ok(())
}

/// Returns `(order, line_ids)`: `order[k]` is the source index of the k-th
/// token in reading order, `line_ids[k]` its global line number.
fn reading_order(words: &[Word]) -> (Vec<usize>, Vec<usize>) {
    let page_count = words.iter().map(|w| w.page + 1).max().unwrap_or(0);
    let mut order = Vec::with_capacity(words.len());
    let mut line_ids = Vec::with_capacity(words.len());
    let mut next_line = 0;

    for page in 0..page_count {
        let mut idx: Vec<usize> = (0..words.len()).filter(|&i| words[i].page == page).collect();
        idx.sort_by(|&a, &b| {
            let (wa, wb) = (&words[a].bbox, &words[b].bbox);
            wa.y0
                .total_cmp(&wb.y0)
                .then(wa.x0.total_cmp(&wb.x0))
                .then(a.cmp(&b))
        });

        // Each line is keyed by its anchor, the first (topmost) word assigned.
        let mut lines: Vec<Vec<usize>> = Vec::new();
        for &i in &idx {
            let b = &words[i].bbox;
            match lines
                .iter_mut()
                .find(|line| words[line[0]].bbox.shares_line_with(b))
            {
                Some(line) => line.push(i),
                None => lines.push(vec![i]),
            }
        }

        let mean_y0 = |line: &[usize]| {
            line.iter().map(|&i| words[i].bbox.y0).sum::<f64>() / line.len() as f64
        };
        let mut keyed: Vec<(f64, usize, Vec<usize>)> = lines
            .into_iter()
            .enumerate()
            .map(|(k, line)| (mean_y0(&line), k, line))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        for (_, _, mut line) in keyed {
            line.sort_by(|&a, &b| {
                words[a]
                    .bbox
                    .x0
                    .total_cmp(&words[b].bbox.x0)
                    .then(a.cmp(&b))
            });
            for i in line {
                order.push(i);
                line_ids.push(next_line);
            }
            next_line += 1;
        }
    }
    (order, line_ids)
}

fn line_ranges(line_of: &[usize]) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..=line_of.len() {
        if i == line_of.len() || line_of[i] != line_of[start] {
            ranges.push(start..i);
            start = i;
        }
    }
    ranges
}

// OCR-JSON wire format.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OcrPayload {
    doc_id: String,
    pages: Vec<OcrPage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OcrPage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height_px: Option<f64>,
    words: Vec<OcrWord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OcrWord {
    text: String,
    bbox: [f64; 4],
}

/// Parses an OCR-JSON payload into a [`Document`].
///
/// Coordinates are expected as page fractions. When a page reports
/// `width_px`/`height_px` and a word's coordinates exceed 1, that word's box
/// is treated as pixels and divided by the page dimensions.
pub fn parse_ocr_document(bytes: &[u8]) -> Result<Document, DocError> {
    let payload: OcrPayload =
        serde_json::from_slice(bytes).map_err(|e| DocError::MalformedPayload(e.to_string()))?;

    let mut page_sizes = Vec::with_capacity(payload.pages.len());
    let mut words = Vec::new();
    let mut index = 0;
    for (page_no, page) in payload.pages.into_iter().enumerate() {
        let size = match (page.width_px, page.height_px) {
            (Some(w), Some(h)) if w > 0.0 && h > 0.0 => Some(PageSize {
                width_px: w,
                height_px: h,
            }),
            (None, None) => None,
            _ => {
                return Err(DocError::MalformedPayload(format!(
                    "page {page_no} has incomplete or non-positive pixel dimensions"
                )))
            }
        };
        page_sizes.push(size);
        for w in page.words {
            let mut raw = w.bbox;
            if let Some(s) = size {
                if raw.iter().any(|&v| v > 1.0) {
                    raw = [
                        raw[0] / s.width_px,
                        raw[1] / s.height_px,
                        raw[2] / s.width_px,
                        raw[3] / s.height_px,
                    ];
                }
            }
            let bbox = BBox::try_from(raw).map_err(|reason| DocError::BadBBox { index, reason })?;
            words.push(Word {
                page: page_no,
                text: w.text,
                bbox,
            });
            index += 1;
        }
    }
    Document::from_words(payload.doc_id, page_sizes, words)
}

/// Renders tokens as plain text: single spaces within a line, one line break
/// between lines.
pub fn render_text(doc: &Document) -> String {
    let mut out = String::new();
    for (k, line) in doc.lines().iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for (j, t) in doc.tokens()[line.clone()].iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&t.text);
        }
    }
    out
}

/// Reading-order comparison between two tokens of the same document.
pub fn reading_cmp(doc: &Document, a: usize, b: usize) -> Ordering {
    let (ta, tb) = (&doc.tokens()[a], &doc.tokens()[b]);
    ta.page
        .cmp(&tb.page)
        .then(doc.line_of(a).cmp(&doc.line_of(b)))
        .then(ta.bbox.x0.total_cmp(&tb.bbox.x0))
        .then(ta.token_id.cmp(&tb.token_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(words: &[(&str, [f64; 4])]) -> Vec<u8> {
        let words: Vec<_> = words
            .iter()
            .map(|(t, b)| serde_json::json!({"text": t, "bbox": b}))
            .collect();
        serde_json::to_vec(&serde_json::json!({
            "doc_id": "d1",
            "pages": [{"words": words}]
        }))
        .unwrap()
    }

    #[test]
    fn single_word_document() {
        let doc = parse_ocr_document(&payload(&[("Fever", [0.1, 0.1, 0.2, 0.12])])).unwrap();
        assert_eq!(doc.len(), 1);
        assert_eq!(doc.tokens()[0].token_id, 0);
        assert_eq!(doc.tokens()[0].text, "Fever");
        assert_eq!(render_text(&doc), "Fever");
    }

    #[test]
    fn zero_words_is_empty_document() {
        let err = parse_ocr_document(&payload(&[])).unwrap_err();
        assert!(matches!(err, DocError::EmptyDocument(id) if id == "d1"));
    }

    #[test]
    fn same_line_words_sorted_by_x() {
        let doc = parse_ocr_document(&payload(&[
            ("B", [0.5, 0.1, 0.6, 0.12]),
            ("A", [0.1, 0.1, 0.2, 0.12]),
        ]))
        .unwrap();
        let texts: Vec<_> = doc.tokens().iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["A", "B"]);
        assert_eq!(doc.lines().len(), 1);
    }

    #[test]
    fn one_line_concatenation() {
        let doc = parse_ocr_document(&payload(&[
            ("Fever", [0.5, 0.1, 0.6, 0.12]),
            ("Chief", [0.1, 0.1, 0.2, 0.12]),
            ("Complaint", [0.25, 0.101, 0.45, 0.121]),
        ]))
        .unwrap();
        assert_eq!(render_text(&doc), "Chief Complaint Fever");
    }

    #[test]
    fn two_lines_in_y_order() {
        // Line 2 starts below line 1 ends, and appears first in the file.
        let doc = parse_ocr_document(&payload(&[
            ("second", [0.1, 0.20, 0.3, 0.22]),
            ("line", [0.35, 0.20, 0.45, 0.22]),
            ("first", [0.1, 0.10, 0.3, 0.12]),
        ]))
        .unwrap();
        assert_eq!(render_text(&doc), "first\nsecond line");
        assert_eq!(doc.line_of(0), 0);
        assert_eq!(doc.line_of(2), 1);
    }

    #[test]
    fn half_height_overlap_rule() {
        // 50% overlap of the smaller height shares a line, less does not.
        let a = BBox::new(0.1, 0.25, 0.2, 0.5).unwrap();
        let b = BBox::new(0.3, 0.375, 0.4, 0.625).unwrap();
        let c = BBox::new(0.3, 0.376, 0.4, 0.626).unwrap();
        assert!(a.shares_line_with(&b));
        assert!(!a.shares_line_with(&c));
    }

    #[test]
    fn bad_bbox_reports_token_index() {
        let err = parse_ocr_document(&payload(&[
            ("ok", [0.1, 0.1, 0.2, 0.12]),
            ("bad", [0.3, 0.1, 0.2, 0.12]),
        ]))
        .unwrap_err();
        assert!(matches!(err, DocError::BadBBox { index: 1, .. }));
    }

    #[test]
    fn malformed_payloads() {
        assert!(matches!(
            parse_ocr_document(b"{not json"),
            Err(DocError::MalformedPayload(_))
        ));
        assert!(matches!(
            parse_ocr_document(br#"{"doc_id":"x","pages":[{"words":[{"text":"a\nb","bbox":[0.1,0.1,0.2,0.2]}]}]}"#),
            Err(DocError::MalformedPayload(_))
        ));
        assert!(matches!(
            parse_ocr_document(br#"{"doc_id":"x","pages":[{"words":[{"text":"","bbox":[0.1,0.1,0.2,0.2]}]}]}"#),
            Err(DocError::MalformedPayload(_))
        ));
        assert!(matches!(
            parse_ocr_document(br#"{"doc_id":"x","pages":[]}"#),
            Err(DocError::EmptyDocument(_))
        ));
    }

    #[test]
    fn pixel_coordinates_are_normalized() {
        let bytes = br#"{"doc_id":"px","pages":[{"width_px":1000,"height_px":2000,
            "words":[{"text":"Fever","bbox":[100,200,200,240]}]}]}"#;
        let doc = parse_ocr_document(bytes).unwrap();
        let b = doc.tokens()[0].bbox;
        assert!((b.x0 - 0.1).abs() < 1e-12 && (b.y0 - 0.1).abs() < 1e-12);
        assert!((b.x1 - 0.2).abs() < 1e-12 && (b.y1 - 0.12).abs() < 1e-12);
        // round trip keeps normalized coordinates and page sizes
        let again = parse_ocr_document(&doc.to_ocr_json()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn multi_page_ordering() {
        let bytes = br#"{"doc_id":"mp","pages":[
            {"words":[{"text":"p0","bbox":[0.1,0.5,0.2,0.52]}]},
            {"words":[{"text":"p1","bbox":[0.1,0.1,0.2,0.12]}]}]}"#;
        let doc = parse_ocr_document(bytes).unwrap();
        assert_eq!(render_text(&doc), "p0\np1");
        assert_eq!(doc.tokens()[1].page, 1);
        assert_eq!(reading_cmp(&doc, 0, 1), Ordering::Less);
    }

    #[test]
    fn class_label_strings() {
        for c in ClassLabel::ALL {
            assert_eq!(c.as_str().parse::<ClassLabel>().unwrap(), c);
            assert_eq!(ClassLabel::from_index(c.index()), Some(c));
        }
        assert!(!ClassLabel::Other.is_masked());
        assert_eq!(
            serde_json::to_string(&ClassLabel::PatientId).unwrap(),
            "\"PATIENT_ID\""
        );
    }
}
