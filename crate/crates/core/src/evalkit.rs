//! Validation metrics: confusion counts, the six-column metric row, Cohen's
//! kappa, rater adjudication and integer reconstruction of rounded metric rows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("disagreement on ({doc_id}, {feature}) has no adjudicated value")]
    UncoveredDisagreement { doc_id: String, feature: String },
    #[error("adjudication given for agreeing cell ({doc_id}, {feature})")]
    SpuriousAdjudication { doc_id: String, feature: String },
    #[error("duplicate annotation cell ({doc_id}, {feature})")]
    DuplicateCell { doc_id: String, feature: String },
    #[error("bad annotation value {0:?}")]
    BadValue(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn from_bool(b: bool) -> Self {
        if b {
            YesNo::Yes
        } else {
            YesNo::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == YesNo::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => "YES",
            YesNo::No => "NO",
        }
    }
}

impl fmt::Display for YesNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for YesNo {
    type Err = EvalError;

    /// Accepts yes/no, y/n and 1/0 in any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "1" | "true" => Ok(YesNo::Yes),
            "no" | "n" | "0" | "false" => Ok(YesNo::No),
            _ => Err(EvalError::BadValue(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u32,
    pub fp: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
    pub tn: u32,
}

impl ConfusionCounts {
    pub const fn new(tp: u32, fp: u32, fn_: u32, tn: u32) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn n(&self) -> u32 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl fmt::Display for ConfusionCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(tp={}, fp={}, fn={}, tn={})", self.tp, self.fp, self.fn_, self.tn)
    }
}

pub fn confusion(pred: &[YesNo], truth: &[YesNo]) -> Result<ConfusionCounts, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (YesNo::Yes, YesNo::Yes) => c.tp += 1,
            (YesNo::Yes, YesNo::No) => c.fp += 1,
            (YesNo::No, YesNo::Yes) => c.fn_ += 1,
            (YesNo::No, YesNo::No) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        Self::new(0, 0, 0, 0)
    }
}

/// Which ratios hit a zero denominator and were filled by policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegeneracyFlags {
    pub no_positives: bool,
    pub no_negatives: bool,
    pub no_predicted_positives: bool,
    pub f1_undefined: bool,
}

impl DegeneracyFlags {
    pub fn any(&self) -> bool {
        self.no_positives || self.no_negatives || self.no_predicted_positives || self.f1_undefined
    }

    /// Space-separated flag names, empty when nothing is degenerate.
    pub fn describe(&self) -> String {
        let mut out = Vec::new();
        if self.no_positives {
            out.push("no_positives");
        }
        if self.no_negatives {
            out.push("no_negatives");
        }
        if self.no_predicted_positives {
            out.push("no_predicted_positives");
        }
        if self.f1_undefined {
            out.push("f1_undefined");
        }
        out.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: f64,
}

impl MetricRow {
    pub const fn new(accuracy: f64, sensitivity: f64, specificity: f64, precision: f64, f1: f64, auc: f64) -> Self {
        Self {
            accuracy,
            sensitivity,
            specificity,
            precision,
            f1,
            auc,
        }
    }

    pub fn ones() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    }

    /// Columns in display order: acc, sen, spec, pre, f1, auc.
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.precision,
            self.f1,
            self.auc,
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["accuracy", "sensitivity", "specificity", "precision", "f1", "auc"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub metrics: MetricRow,
    pub flags: DegeneracyFlags,
}

/// Metric row for hard binary predictions; AUC is balanced accuracy.
///
/// Zero denominators: sensitivity and specificity become 1, precision
/// becomes 1, F1 becomes 0, each with its flag set.
pub fn metric_row(c: &ConfusionCounts) -> ScoredRow {
    let ratio = |num: u32, den: u32, fallback: f64| {
        if den == 0 {
            (fallback, true)
        } else {
            (f64::from(num) / f64::from(den), false)
        }
    };
    let n = c.n();
    let accuracy = if n == 0 {
        0.0
    } else {
        f64::from(c.tp + c.tn) / f64::from(n)
    };
    let (sensitivity, no_positives) = ratio(c.tp, c.tp + c.fn_, 1.0);
    let (specificity, no_negatives) = ratio(c.tn, c.tn + c.fp, 1.0);
    let (precision, no_predicted_positives) = ratio(c.tp, c.tp + c.fp, 1.0);
    // equals the harmonic mean of precision and sensitivity whenever both are defined
    let (f1, f1_undefined) = match 2 * c.tp + c.fp + c.fn_ {
        0 => (0.0, true),
        d => (f64::from(2 * c.tp) / f64::from(d), false),
    };
    ScoredRow {
        metrics: MetricRow {
            accuracy,
            sensitivity,
            specificity,
            precision,
            f1,
            auc: (sensitivity + specificity) / 2.0,
        },
        flags: DegeneracyFlags {
            no_positives,
            no_negatives,
            no_predicted_positives,
            f1_undefined,
        },
    }
}

/// Cohen's kappa over any categorical alphabet. When chance agreement is 1
/// (both raters constant on the same category) kappa is taken to be 1.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = a.len() as f64;
    let mut agree = 0usize;
    let mut ma: HashMap<&T, usize> = HashMap::new();
    let mut mb: HashMap<&T, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        if x == y {
            agree += 1;
        }
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ma
        .iter()
        .map(|(k, ca)| mb.get(k).map_or(0.0, |cb| (*ca as f64 / n) * (*cb as f64 / n)))
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        // both raters constant on the same category
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// How a two-decimal reported figure may relate to the exact value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundingRule {
    /// Reported value is the nearest two-decimal figure (±0.005).
    Nearest,
    /// Reported value is either the nearest or the truncated two-decimal figure.
    #[default]
    NearestOrTruncated,
}

const ROUND_TOL: f64 = 0.005 + 1e-9;

fn consistent(exact: f64, reported: f64, rule: RoundingRule) -> bool {
    if (exact - reported).abs() <= ROUND_TOL {
        return true;
    }
    rule == RoundingRule::NearestOrTruncated && exact >= reported - 1e-9 && exact < reported + 0.01 - 1e-9
}

pub fn row_consistent(exact: &MetricRow, reported: &MetricRow, rule: RoundingRule) -> bool {
    exact
        .values()
        .iter()
        .zip(reported.values())
        .all(|(&e, r)| consistent(e, r, rule))
}

/// All non-degenerate confusion matrices of size `n` whose metric row rounds
/// to `target`, ordered by `(tp, fp, fn, tn)`.
pub fn reconcile_table_row(target: &MetricRow, n: u32) -> Vec<ConfusionCounts> {
    reconcile_table_row_with(target, n, RoundingRule::default())
}

pub fn reconcile_table_row_with(target: &MetricRow, n: u32, rule: RoundingRule) -> Vec<ConfusionCounts> {
    let mut out = Vec::new();
    for tp in 0..=n {
        for fp in 0..=n - tp {
            for fn_ in 0..=n - tp - fp {
                let c = ConfusionCounts::new(tp, fp, fn_, n - tp - fp - fn_);
                let scored = metric_row(&c);
                if scored.flags.any() {
                    continue;
                }
                if row_consistent(&scored.metrics, target, rule) {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// A named published validation row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub feature: &'static str,
    pub reported: MetricRow,
}

const fn rr(feature: &'static str, m: [f64; 6]) -> ReferenceRow {
    ReferenceRow {
        feature,
        reported: MetricRow::new(m[0], m[1], m[2], m[3], m[4], m[5]),
    }
}

/// Reported clinician-validation figures per feature (acc, sen, spec, pre, f1, auc).
pub const REFERENCE_ROWS: [ReferenceRow; 12] = [
    rr("AKI Mentioned", [0.96, 0.5, 1.0, 1.0, 0.67, 0.75]),
    rr("Angiography Done", [0.98, 1.0, 0.98, 0.86, 0.92, 0.98]),
    rr("Consultation by Nephrologist", [0.81, 0.12, 0.95, 0.33, 0.18, 0.53]),
    rr("Diuretic Given", [0.98, 1.0, 0.97, 0.92, 0.96, 0.98]),
    rr("Fluid Restriction Advised", [0.98, 1.0, 0.98, 0.67, 0.8, 0.98]),
    rr("General Anaesthesia", [0.81, 0.65, 0.9, 0.79, 0.71, 0.77]),
    rr("Hypertension", [0.98, 1.0, 0.98, 0.75, 0.86, 0.98]),
    rr("ICU Admission", [0.71, 0.5, 0.95, 0.93, 0.65, 0.72]),
    rr("Imaging Procedure with Contrast", [0.94, 0.88, 0.95, 0.78, 0.83, 0.9]),
    rr("Oxygen Saturation Drop", [0.96, 0.5, 1.0, 1.0, 0.67, 0.75]),
    rr("Tachycardia", [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
    rr("Ventilator Used", [0.98, 1.0, 0.98, 0.8, 0.89, 0.98]),
];

/// Two raters' labels for every (doc, feature) cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    cells: BTreeMap<(String, String), (YesNo, YesNo)>,
}

/// Adjudicated values for disagreement cells, keyed by (doc_id, feature).
pub type Adjudication = BTreeMap<(String, String), YesNo>;

/// Resolved truth: feature -> doc_id -> value.
pub type TruthTable = BTreeMap<String, BTreeMap<String, YesNo>>;

#[derive(Debug, Deserialize)]
struct AnnotationCsvRow {
    doc_id: String,
    feature: String,
    rater1: String,
    rater2: String,
    #[serde(default)]
    adjudicated: Option<String>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: &str, feature: &str, r1: YesNo, r2: YesNo) -> Result<(), EvalError> {
        let key = (doc_id.to_string(), feature.to_string());
        if self.cells.contains_key(&key) {
            return Err(EvalError::DuplicateCell {
                doc_id: key.0,
                feature: key.1,
            });
        }
        self.cells.insert(key, (r1, r2));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cells.keys().map(|(d, _)| d.clone()).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn cells(&self) -> impl Iterator<Item = (&str, &str, YesNo, YesNo)> {
        self.cells.iter().map(|((d, f), (a, b))| (d.as_str(), f.as_str(), *a, *b))
    }

    /// Parses `doc_id,feature,rater1,rater2[,adjudicated]`. An empty
    /// adjudicated column means no override.
    pub fn from_csv(bytes: &[u8]) -> Result<(Self, Adjudication), EvalError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
        let mut set = Self::new();
        let mut adj = Adjudication::new();
        for rec in rdr.deserialize::<AnnotationCsvRow>() {
            let rec = rec.map_err(|e| EvalError::Csv(e.to_string()))?;
            set.insert(&rec.doc_id, &rec.feature, rec.rater1.parse()?, rec.rater2.parse()?)?;
            if let Some(a) = rec.adjudicated.filter(|a| !a.trim().is_empty()) {
                adj.insert((rec.doc_id, rec.feature), a.parse()?);
            }
        }
        Ok((set, adj))
    }

    /// Inter-rater kappa per feature.
    pub fn rater_kappa(&self) -> BTreeMap<String, f64> {
        let mut per: BTreeMap<&str, (Vec<YesNo>, Vec<YesNo>)> = BTreeMap::new();
        for ((_, f), (a, b)) in &self.cells {
            let e = per.entry(f.as_str()).or_default();
            e.0.push(*a);
            e.1.push(*b);
        }
        per.into_iter()
            .map(|(f, (a, b))| (f.to_string(), cohen_kappa(&a, &b).expect("equal non-empty vectors")))
            .collect()
    }
}

pub fn resolve_ground_truth(ann: &AnnotationSet, adjudication: &Adjudication) -> Result<TruthTable, EvalError> {
    for key in adjudication.keys() {
        match ann.cells.get(key) {
            Some((a, b)) if a != b => {}
            _ => {
                return Err(EvalError::SpuriousAdjudication {
                    doc_id: key.0.clone(),
                    feature: key.1.clone(),
                })
            }
        }
    }
    let mut out = TruthTable::new();
    for ((doc, feature), (a, b)) in &ann.cells {
        let v = if a == b {
            *a
        } else {
            *adjudication
                .get(&(doc.clone(), feature.clone()))
                .ok_or_else(|| EvalError::UncoveredDisagreement {
                    doc_id: doc.clone(),
                    feature: feature.clone(),
                })?
        };
        out.entry(feature.clone()).or_default().insert(doc.clone(), v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub feature: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricRow,
    pub flags: DegeneracyFlags,
}

/// Scores predictions against truth for each feature in `features`, using
/// only documents present in both tables.
pub fn validation_report(
    features: &[String],
    truth: &TruthTable,
    predictions: &TruthTable,
) -> Result<Vec<ValidationRow>, EvalError> {
    let empty = BTreeMap::new();
    let mut rows = Vec::with_capacity(features.len());
    for f in features {
        let t = truth.get(f).unwrap_or(&empty);
        let p = predictions.get(f).unwrap_or(&empty);
        let (pred, gold): (Vec<YesNo>, Vec<YesNo>) = t
            .iter()
            .filter_map(|(doc, tv)| p.get(doc).map(|pv| (*pv, *tv)))
            .unzip();
        let counts = confusion(&pred, &gold)?;
        let scored = metric_row(&counts);
        rows.push(ValidationRow {
            feature: f.clone(),
            counts,
            metrics: scored.metrics,
            flags: scored.flags,
        });
    }
    Ok(rows)
}

/// CSV in the column order acc, sen, spec, pre, f1, auc followed by the raw
/// counts and degeneracy flags.
pub fn report_to_csv(rows: &[ValidationRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "feature",
        "accuracy",
        "sensitivity",
        "specificity",
        "precision",
        "f1",
        "auc",
        "tp",
        "fp",
        "fn",
        "tn",
        "flags",
    ])
    .expect("write to vec");
    for r in rows {
        let mut rec: Vec<String> = vec![r.feature.clone()];
        rec.extend(r.metrics.values().iter().map(|v| format!("{v:.4}")));
        rec.extend([r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn].map(|v| v.to_string()));
        rec.push(r.flags.describe());
        w.write_record(&rec).expect("write to vec");
    }
    w.into_inner().expect("flush vec")
}

#[cfg(test)]
mod tests {
    use super::*;
    use YesNo::{No as N, Yes as Y};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn confusion_basics() {
        assert_eq!(confusion(&[Y; 5], &[Y; 5]).unwrap(), ConfusionCounts::new(5, 0, 0, 0));
        let t = [Y, N, Y, N, N];
        let p: Vec<YesNo> = t.iter().map(|v| if v.is_yes() { N } else { Y }).collect();
        let c = confusion(&p, &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!((c.fp, c.fn_), (3, 2));
        assert_eq!(
            confusion(&[Y], &[Y, N]),
            Err(EvalError::LengthMismatch { left: 1, right: 2 })
        );
        assert_eq!(confusion(&[], &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn aki_counts_metric_row() {
        let m = metric_row(&ConfusionCounts::new(2, 0, 2, 44)).metrics;
        assert!(close(m.accuracy, 46.0 / 48.0, 1e-12));
        assert!(close(m.accuracy, 0.958, 5e-4));
        assert_eq!((m.sensitivity, m.specificity, m.precision), (0.5, 1.0, 1.0));
        assert!(close(m.f1, 2.0 / 3.0, 1e-12));
        assert_eq!(m.auc, 0.75);
    }

    #[test]
    fn nephrologist_counts_metric_row() {
        let m = metric_row(&ConfusionCounts::new(1, 2, 7, 38)).metrics;
        assert!(close(m.accuracy, 0.8125, 1e-12));
        assert!(close(m.sensitivity, 0.125, 1e-12));
        assert!(close(m.specificity, 0.95, 1e-12));
        assert!(close(m.precision, 1.0 / 3.0, 1e-12));
        // 2 * (1/3) * (1/8) / (1/3 + 1/8) = 2/11
        assert!(close(m.f1, 2.0 / 11.0, 1e-12));
        assert!(close(m.auc, 0.5375, 1e-12));
    }

    #[test]
    fn perfect_counts_give_ones() {
        for (tp, tn) in [(1, 47), (24, 24), (47, 1)] {
            let s = metric_row(&ConfusionCounts::new(tp, 0, 0, tn));
            assert_eq!(s.metrics, MetricRow::ones());
            assert!(!s.flags.any());
        }
    }

    #[test]
    fn degenerate_flags() {
        let s = metric_row(&ConfusionCounts::new(0, 0, 0, 10));
        assert!(s.flags.no_positives && s.flags.no_predicted_positives && s.flags.f1_undefined);
        assert_eq!((s.metrics.sensitivity, s.metrics.precision, s.metrics.f1), (1.0, 1.0, 0.0));
        let s = metric_row(&ConfusionCounts::new(3, 0, 2, 0));
        assert!(s.flags.no_negatives);
        assert_eq!(s.metrics.specificity, 1.0);
        let s = metric_row(&ConfusionCounts::new(0, 3, 2, 5));
        assert!(!s.flags.any());
        assert_eq!(s.metrics.f1, 0.0);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[Y, N, Y], &[Y, N, Y]).unwrap(), 1.0);
        // p_o = 0.5 and p_e = 0.5*0.5 + 0.5*0.5 = 0.5
        assert_eq!(cohen_kappa(&[Y, Y, N, N], &[Y, N, Y, N]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&[Y; 4], &[Y; 4]).unwrap(), 1.0);
        assert!(cohen_kappa(&[Y], &[]).is_err());
        // p_o = 0.75, p_e = 0.75*0.5 + 0.25*0.5 = 0.5
        assert!(close(cohen_kappa(&[Y, Y, Y, N], &[Y, Y, N, N]).unwrap(), 0.5, 1e-12));
    }

    #[test]
    fn reconcile_all_ones_characterization() {
        let got = reconcile_table_row(&MetricRow::ones(), 48);
        let want: Vec<ConfusionCounts> = (1..48).map(|tp| ConfusionCounts::new(tp, 0, 0, 48 - tp)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn reconcile_exemplars() {
        let aki = REFERENCE_ROWS.iter().find(|r| r.feature == "AKI Mentioned").unwrap();
        assert!(reconcile_table_row(&aki.reported, 48).contains(&ConfusionCounts::new(2, 0, 2, 44)));
        let neph = REFERENCE_ROWS
            .iter()
            .find(|r| r.feature == "Consultation by Nephrologist")
            .unwrap();
        assert!(reconcile_table_row(&neph.reported, 48).contains(&ConfusionCounts::new(1, 2, 7, 38)));
        // the nephrologist row needs truncation (0.5375 is reported as 0.53)
        assert!(!reconcile_table_row_with(&neph.reported, 48, RoundingRule::Nearest)
            .contains(&ConfusionCounts::new(1, 2, 7, 38)));
    }

    #[test]
    fn adjudication_rules() {
        let mut ann = AnnotationSet::new();
        ann.insert("d1", "aki", Y, Y).unwrap();
        ann.insert("d2", "aki", N, Y).unwrap();
        ann.insert("d3", "aki", N, N).unwrap();
        let mut adj = Adjudication::new();
        assert_eq!(
            resolve_ground_truth(&ann, &adj),
            Err(EvalError::UncoveredDisagreement {
                doc_id: "d2".into(),
                feature: "aki".into()
            })
        );
        adj.insert(("d2".into(), "aki".into()), Y);
        let t = resolve_ground_truth(&ann, &adj).unwrap();
        assert_eq!(t["aki"]["d1"], Y);
        assert_eq!(t["aki"]["d2"], Y);
        assert_eq!(t["aki"]["d3"], N);
        adj.insert(("d1".into(), "aki".into()), N);
        assert!(matches!(
            resolve_ground_truth(&ann, &adj),
            Err(EvalError::SpuriousAdjudication { .. })
        ));
    }

    #[test]
    fn full_agreement_passes_through() {
        let mut ann = AnnotationSet::new();
        ann.insert("d1", "icu", Y, Y).unwrap();
        ann.insert("d2", "icu", N, N).unwrap();
        let t = resolve_ground_truth(&ann, &Adjudication::new()).unwrap();
        assert_eq!(t["icu"].values().copied().collect::<Vec<_>>(), vec![Y, N]);
        assert_eq!(ann.rater_kappa()["icu"], 1.0);
    }

    #[test]
    fn annotation_csv() {
        let csv = "doc_id,feature,rater1,rater2,adjudicated\nd1,aki,yes,no,YES\nd2,aki,No,no,\n";
        let (ann, adj) = AnnotationSet::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(ann.len(), 2);
        assert_eq!(adj.len(), 1);
        let t = resolve_ground_truth(&ann, &adj).unwrap();
        assert_eq!(t["aki"]["d1"], Y);
        let bad = "doc_id,feature,rater1,rater2\nd1,aki,maybe,no\n";
        assert!(matches!(AnnotationSet::from_csv(bad.as_bytes()), Err(EvalError::BadValue(_))));
    }

    #[test]
    fn report_csv_shape() {
        let mut truth = TruthTable::new();
        truth.entry("aki".into()).or_default().insert("d1".into(), Y);
        truth.entry("aki".into()).or_default().insert("d2".into(), N);
        let rows = validation_report(&["aki".into()], &truth, &truth).unwrap();
        assert_eq!(rows[0].metrics, MetricRow::ones());
        let text = String::from_utf8(report_to_csv(&rows)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("feature,accuracy,sensitivity"));
        assert_eq!(lines.next().unwrap(), "aki,1.0000,1.0000,1.0000,1.0000,1.0000,1.0000,1,0,0,1,");
    }
}
