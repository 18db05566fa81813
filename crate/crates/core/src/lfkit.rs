//! Labeling functions and the LF vote matrix.
//!
//! A labeling function (LF) votes its target class on a token when all of its
//! configured conditions hold: a text trigger, a positional region, and a
//! trigger-relative adjacency rule. Otherwise it abstains.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{BBox, ClassLabel, Document};

#[derive(Debug, Error)]
pub enum LfError {
    #[error("labeling function `{0}` needs at least one of triggers, region or adjacency")]
    NoCondition(String),
    #[error("duplicate labeling function id `{0}`")]
    DuplicateLfId(String),
    #[error("adjacency rule on `{0}` has an empty anchor")]
    EmptyAnchor(String),
    #[error("adjacency rule on `{0}` needs max_gap >= 1")]
    ZeroGap(String),
    #[error("invalid region on `{lf}`: {reason}")]
    BadRegion { lf: String, reason: String },
    #[error("gold label references unknown token {token_id} in document `{doc_id}`")]
    DanglingGoldReference { doc_id: String, token_id: usize },
    #[error("failed to read LF config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse LF config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One LF output on one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vote {
    Abstain,
    Class(ClassLabel),
}

impl Vote {
    pub fn class(self) -> Option<ClassLabel> {
        match self {
            Vote::Abstain => None,
            Vote::Class(c) => Some(c),
        }
    }

    pub fn is_abstain(self) -> bool {
        self == Vote::Abstain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<usize>,
    pub region: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    /// Up to `max_gap` tokens following the anchor on the same line.
    NextOnLine,
    /// The first `max_gap` tokens of the next line that start at or right of
    /// the anchor's left edge.
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyRule {
    pub anchor: String,
    pub relation: Relation,
    pub max_gap: usize,
}

/// A validated labeling function.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingFunction {
    lf_id: String,
    target: ClassLabel,
    triggers: Vec<Vec<String>>,
    position: Option<PositionRule>,
    adjacency: Option<(Vec<String>, AdjacencyRule)>,
}

/// Normalization shared by triggers and token text: lowercase, trailing
/// `.,:;` stripped.
pub fn normalize_token(text: &str) -> String {
    text.trim_end_matches(['.', ',', ':', ';']).to_lowercase()
}

fn split_phrase(phrase: &str) -> Vec<String> {
    phrase
        .split_whitespace()
        .map(normalize_token)
        .filter(|w| !w.is_empty())
        .collect()
}

impl LabelingFunction {
    pub fn new(
        lf_id: impl Into<String>,
        target: ClassLabel,
        triggers: Vec<String>,
        position: Option<PositionRule>,
        adjacency: Option<AdjacencyRule>,
    ) -> Result<Self, LfError> {
        let lf_id = lf_id.into();
        let triggers: Vec<Vec<String>> = triggers
            .iter()
            .map(|t| split_phrase(t))
            .filter(|t| !t.is_empty())
            .collect();
        if let Some(p) = &position {
            BBox::new(p.region.x0, p.region.y0, p.region.x1, p.region.y1).map_err(|reason| {
                LfError::BadRegion {
                    lf: lf_id.clone(),
                    reason,
                }
            })?;
        }
        let adjacency = match adjacency {
            Some(rule) => {
                let anchor = split_phrase(&rule.anchor);
                if anchor.is_empty() {
                    return Err(LfError::EmptyAnchor(lf_id));
                }
                if rule.max_gap == 0 {
                    return Err(LfError::ZeroGap(lf_id));
                }
                Some((anchor, rule))
            }
            None => None,
        };
        if triggers.is_empty() && position.is_none() && adjacency.is_none() {
            return Err(LfError::NoCondition(lf_id));
        }
        Ok(Self {
            lf_id,
            target,
            triggers,
            position,
            adjacency,
        })
    }

    pub fn lf_id(&self) -> &str {
        &self.lf_id
    }

    pub fn target(&self) -> ClassLabel {
        self.target
    }

    /// Votes for every token of `doc`, in token order.
    pub fn apply(&self, doc: &Document) -> Vec<Vote> {
        apply_lf(self, doc)
    }
}

/// Marks tokens covered by any occurrence of `phrase` on a single line.
fn phrase_hits(doc: &Document, norm: &[String], phrase: &[String], hits: &mut [bool]) {
    for line in doc.lines() {
        let n = phrase.len();
        if line.len() < n {
            continue;
        }
        for start in line.start..=line.end - n {
            if (0..n).all(|k| norm[start + k] == phrase[k]) {
                hits[start..start + n].iter_mut().for_each(|h| *h = true);
            }
        }
    }
}

/// Occurrences of `phrase` as `(first, last)` token indices.
fn phrase_spans(doc: &Document, norm: &[String], phrase: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let n = phrase.len();
    for line in doc.lines() {
        if line.len() < n {
            continue;
        }
        for start in line.start..=line.end - n {
            if (0..n).all(|k| norm[start + k] == phrase[k]) {
                spans.push((start, start + n - 1));
            }
        }
    }
    spans
}

/// Applies one LF to a document. Output length equals the token count.
pub fn apply_lf(lf: &LabelingFunction, doc: &Document) -> Vec<Vote> {
    let n = doc.len();
    let norm: Vec<String> = doc.tokens().iter().map(|t| normalize_token(&t.text)).collect();
    let mut fires = vec![true; n];

    if !lf.triggers.is_empty() {
        let mut hits = vec![false; n];
        for trig in &lf.triggers {
            phrase_hits(doc, &norm, trig, &mut hits);
        }
        fires.iter_mut().zip(&hits).for_each(|(f, h)| *f &= *h);
    }

    if let Some(pos) = &lf.position {
        for (f, t) in fires.iter_mut().zip(doc.tokens()) {
            let on_page = pos.page.is_none_or(|p| p == t.page);
            *f &= on_page && pos.region.contains_point(t.bbox.center());
        }
    }

    if let Some((anchor, rule)) = &lf.adjacency {
        let mut near = vec![false; n];
        let mut in_anchor = vec![false; n];
        let lines = doc.lines();
        for (first, last) in phrase_spans(doc, &norm, anchor) {
            in_anchor[first..=last].iter_mut().for_each(|a| *a = true);
            let line_no = doc.line_of(last);
            match rule.relation {
                Relation::NextOnLine => {
                    let end = lines[line_no].end.min(last + 1 + rule.max_gap);
                    near[last + 1..end].iter_mut().for_each(|x| *x = true);
                }
                Relation::Below => {
                    let Some(next) = lines.get(line_no + 1) else { continue };
                    if doc.tokens()[next.start].page != doc.tokens()[last].page {
                        continue;
                    }
                    let left = doc.tokens()[first].bbox.x0;
                    next.clone()
                        .filter(|&i| doc.tokens()[i].bbox.x0 >= left)
                        .take(rule.max_gap)
                        .for_each(|i| near[i] = true);
                }
            }
        }
        for i in 0..n {
            fires[i] &= near[i] && !in_anchor[i];
        }
    }

    fires
        .into_iter()
        .map(|f| if f { Vote::Class(lf.target) } else { Vote::Abstain })
        .collect()
}

/// An ordered set of LFs with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LfSet {
    lfs: Vec<LabelingFunction>,
}

/// Config-file form of one LF.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LfSpec {
    pub lf_id: String,
    pub target: ClassLabel,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<AdjacencyRule>,
}

impl TryFrom<LfSpec> for LabelingFunction {
    type Error = LfError;

    fn try_from(s: LfSpec) -> Result<Self, LfError> {
        let position = s.region.map(|region| PositionRule {
            page: s.page,
            region,
        });
        LabelingFunction::new(s.lf_id, s.target, s.triggers, position, s.adjacency)
    }
}

const DEFAULT_LFSET: &str = include_str!("../assets/default_lfset.json");

impl LfSet {
    pub fn new(lfs: Vec<LabelingFunction>) -> Result<Self, LfError> {
        let mut seen = HashSet::new();
        for lf in &lfs {
            if !seen.insert(lf.lf_id.as_str()) {
                return Err(LfError::DuplicateLfId(lf.lf_id.clone()));
            }
        }
        Ok(Self { lfs })
    }

    pub fn from_specs(specs: Vec<LfSpec>) -> Result<Self, LfError> {
        let lfs = specs
            .into_iter()
            .map(LabelingFunction::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(lfs)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, LfError> {
        Self::from_specs(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self, LfError> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// The shipped LF set targeting the synthetic corpus layout.
    pub fn default_set() -> Self {
        Self::from_json(DEFAULT_LFSET.as_bytes()).expect("bundled LF set is valid")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_LFSET
    }

    pub fn len(&self) -> usize {
        self.lfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lfs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelingFunction> {
        self.lfs.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.lfs.iter().map(|lf| lf.lf_id.clone()).collect()
    }

    /// Row-major votes for one document: `result[token][lf]`.
    pub fn vote_rows(&self, doc: &Document) -> Vec<Vec<Vote>> {
        let columns: Vec<Vec<Vote>> = self.lfs.iter().map(|lf| apply_lf(lf, doc)).collect();
        (0..doc.len())
            .map(|i| columns.iter().map(|c| c[i]).collect())
            .collect()
    }
}

/// Identifies a token across the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenRef {
    pub doc: usize,
    pub token_id: usize,
}

/// Gold labels keyed by `(doc_id, token_id)`.
pub type GoldLabels = BTreeMap<(String, usize), ClassLabel>;

/// Per-token LF votes for a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    docs: Vec<String>,
    lf_ids: Vec<String>,
    rows: Vec<Vec<Vote>>,
    refs: Vec<TokenRef>,
    gold: Vec<Option<ClassLabel>>,
}

impl LabelMatrix {
    /// Assembles a matrix directly from rows; used for tests and synthetic
    /// instances. Panics if rows are ragged.
    pub fn from_rows(lf_ids: Vec<String>, rows: Vec<Vec<Vote>>, gold: Vec<Option<ClassLabel>>) -> Self {
        assert_eq!(rows.len(), gold.len(), "gold must align with rows");
        assert!(
            rows.iter().all(|r| r.len() == lf_ids.len()),
            "label matrix rows must have one vote per LF"
        );
        let refs = (0..rows.len()).map(|i| TokenRef { doc: 0, token_id: i }).collect();
        Self {
            docs: vec!["synthetic".into()],
            lf_ids,
            rows,
            refs,
            gold,
        }
    }

    pub fn docs(&self) -> &[String] {
        &self.docs
    }

    pub fn lf_ids(&self) -> &[String] {
        &self.lf_ids
    }

    pub fn n_lfs(&self) -> usize {
        self.lf_ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<Vote>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Vote] {
        &self.rows[i]
    }

    pub fn token_ref(&self, i: usize) -> &TokenRef {
        &self.refs[i]
    }

    pub fn gold(&self) -> &[Option<ClassLabel>] {
        &self.gold
    }

    pub fn n_gold(&self) -> usize {
        self.gold.iter().filter(|g| g.is_some()).count()
    }
}

/// Applies every LF to every document. Rows follow corpus order then token
/// order.
pub fn build_label_matrix(
    lfs: &LfSet,
    corpus: &[Document],
    gold: Option<&GoldLabels>,
) -> Result<LabelMatrix, LfError> {
    if let Some(gold) = gold {
        for (doc_id, token_id) in gold.keys() {
            let ok = corpus
                .iter()
                .any(|d| d.doc_id() == doc_id && *token_id < d.len());
            if !ok {
                return Err(LfError::DanglingGoldReference {
                    doc_id: doc_id.clone(),
                    token_id: *token_id,
                });
            }
        }
    }

    let per_doc: Vec<Vec<Vec<Vote>>> = corpus.par_iter().map(|d| lfs.vote_rows(d)).collect();

    let mut rows = Vec::new();
    let mut refs = Vec::new();
    let mut gold_col = Vec::new();
    for (di, (doc, doc_rows)) in corpus.iter().zip(per_doc).enumerate() {
        for (ti, row) in doc_rows.into_iter().enumerate() {
            rows.push(row);
            refs.push(TokenRef {
                doc: di,
                token_id: ti,
            });
            gold_col.push(gold.and_then(|g| g.get(&(doc.doc_id().to_string(), ti)).copied()));
        }
    }
    Ok(LabelMatrix {
        docs: corpus.iter().map(|d| d.doc_id().to_string()).collect(),
        lf_ids: lfs.ids(),
        rows,
        refs,
        gold: gold_col,
    })
}

/// Per-LF diagnostics, all fractions of matrix rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LfStats {
    pub coverage: f64,
    pub overlap: f64,
    pub conflict: f64,
}

pub fn coverage_stats(m: &LabelMatrix) -> Vec<LfStats> {
    let n = m.n_rows();
    let mut counts = vec![(0usize, 0usize, 0usize); m.n_lfs()];
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            let Vote::Class(c) = v else { continue };
            let (cov, ovl, con) = &mut counts[j];
            *cov += 1;
            let others = row
                .iter()
                .enumerate()
                .filter(|(k, o)| *k != j && !o.is_abstain());
            let mut any_other = false;
            let mut disagrees = false;
            for (_, o) in others {
                any_other = true;
                disagrees |= o.class() != Some(*c);
            }
            *ovl += usize::from(any_other);
            *con += usize::from(disagrees);
        }
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    counts
        .into_iter()
        .map(|(cov, ovl, con)| LfStats {
            coverage: frac(cov),
            overlap: frac(ovl),
            conflict: frac(con),
        })
        .collect()
}

/// Majority vote over non-abstaining LFs, ties resolved toward `Other` and
/// otherwise toward the lowest class index. All-abstain rows map to `Other`.
pub fn majority_vote(row: &[Vote]) -> ClassLabel {
    let mut counts = [0usize; ClassLabel::COUNT];
    for v in row {
        if let Vote::Class(c) = v {
            counts[c.index()] += 1;
        }
    }
    let best = *counts.iter().max().unwrap_or(&0);
    if counts[ClassLabel::Other.index()] == best {
        return ClassLabel::Other;
    }
    let k = counts.iter().position(|&c| c == best).unwrap_or(ClassLabel::Other.index());
    ClassLabel::from_index(k).unwrap_or(ClassLabel::Other)
}
