//! Label aggregation: a generative reliability model over LF votes trained
//! jointly with a linear feature model.
//!
//! The graphical model is a factor model in which LFs are conditionally
//! independent given the true class `y`. Each LF `j` has one potential per
//! class `k`:
//!
//! ```text
//! phi_j(vote, k) = theta[j][k]            if vote == k
//!                = -theta[j][k] / (K - 1) if vote is another class
//!                = 0                      if vote is ABSTAIN
//! ```
//!
//! so that `P(y = k | votes)` is proportional to
//! `exp(prior[k] + sum_j phi_j(vote_j, k))`. The joint over votes and class is
//! normalized over every vote configuration, which gives the marginal
//! likelihood of a vote row in closed form:
//!
//! ```text
//! log P(votes) = LSE_k(prior[k] + sum_j phi_j(vote_j, k))
//!              - LSE_k(prior[k] + sum_j log Z[j][k])
//! Z[j][k]      = 1 + exp(theta[j][k]) + (K - 1) exp(-theta[j][k] / (K - 1))
//! ```
//!
//! The feature model is `softmax(W x + b)` over [`featurize`] vectors. The
//! training loss is the mean over rows of
//!
//! - gold rows: `-log P_graphical(y) - log P_feature(y)`
//! - unlabeled rows: `-log P(votes) + kl_weight * KL(P_graphical || P_feature)`
//!
//! optimized with AdamW using separate learning rates for the two blocks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{ClassLabel, Document, Token};
use crate::lfkit::{LabelMatrix, LfSet, Vote};

/// Number of hashed lexical buckets in the feature map.
pub const HASH_BUCKETS: usize = 64;
/// Dense feature dimension produced by [`featurize`].
pub const FEATURE_DIM: usize = 7 + HASH_BUCKETS;

const CHECKPOINT_FORMAT: &str = "medex-labelmodel";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LabelModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label matrix has no rows")]
    EmptyMatrix,
    #[error("non-finite loss after epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, LabelModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr_feature: f64,
    pub lr_graphical: f64,
    pub epochs: usize,
    pub kl_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_feature: 5e-5,
            lr_graphical: 0.01,
            epochs: 20,
            kl_weight: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabelModelError::InvalidConfig(m.to_string()));
        if !(self.lr_feature > 0.0 && self.lr_graphical > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Per-LF per-class potentials and class-prior logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphicalParams {
    n_lfs: usize,
    n_classes: usize,
    /// Row-major `n_lfs x n_classes`.
    theta: Vec<f64>,
    class_prior: Vec<f64>,
    /// Class-independent potential of an abstain vote, one per LF. It cancels
    /// in the posterior and only shapes the vote likelihood; fixed from the
    /// matrix abstain rates before training.
    #[serde(default)]
    abstain_logit: Vec<f64>,
}

impl GraphicalParams {
    pub fn zeros(n_lfs: usize, n_classes: usize) -> Self {
        Self {
            n_lfs,
            n_classes,
            theta: vec![0.0; n_lfs * n_classes],
            class_prior: vec![0.0; n_classes],
            abstain_logit: vec![0.0; n_lfs],
        }
    }

    pub fn from_parts(theta: Vec<Vec<f64>>, class_prior: Vec<f64>) -> Result<Self> {
        let n_classes = class_prior.len();
        if n_classes < 2 {
            return Err(LabelModelError::DimensionMismatch("need at least two classes".into()));
        }
        if theta.iter().any(|r| r.len() != n_classes) {
            return Err(LabelModelError::DimensionMismatch(
                "theta rows must have one entry per class".into(),
            ));
        }
        Ok(Self {
            n_lfs: theta.len(),
            n_classes,
            abstain_logit: vec![0.0; theta.len()],
            theta: theta.into_iter().flatten().collect(),
            class_prior,
        })
    }

    pub fn n_lfs(&self) -> usize {
        self.n_lfs
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn theta(&self, lf: usize, class: usize) -> f64 {
        self.theta[lf * self.n_classes + class]
    }

    pub fn theta_row(&self, lf: usize) -> &[f64] {
        &self.theta[lf * self.n_classes..(lf + 1) * self.n_classes]
    }

    pub fn class_prior(&self) -> &[f64] {
        &self.class_prior
    }

    pub fn abstain_logit(&self) -> &[f64] {
        &self.abstain_logit
    }

    /// Sets each LF's abstain potential so that at zero `theta` the model
    /// abstain rate equals the observed one: `alpha = ln(K r / (1 - r))`,
    /// with `r` clamped away from 0 and 1.
    pub fn fit_abstain_rates(&mut self, matrix: &LabelMatrix) {
        let n = matrix.n_rows().max(1) as f64;
        let k = self.n_classes as f64;
        for j in 0..self.n_lfs {
            let abstains = matrix.rows().iter().filter(|r| r[j].is_abstain()).count() as f64;
            let r = (abstains / n).clamp(1e-4, 1.0 - 1e-4);
            self.abstain_logit[j] = (k * r / (1.0 - r)).ln();
        }
    }

    /// Unnormalized log-potentials for each class given one vote row.
    fn scores(&self, votes: &[Vote]) -> Result<Vec<f64>> {
        if votes.len() != self.n_lfs {
            return Err(LabelModelError::DimensionMismatch(format!(
                "vote row has {} entries, model has {} LFs",
                votes.len(),
                self.n_lfs
            )));
        }
        let k = self.n_classes;
        let off = 1.0 / (k as f64 - 1.0);
        let mut s = self.class_prior.clone();
        for (j, v) in votes.iter().enumerate() {
            let Vote::Class(c) = v else { continue };
            let c = c.index();
            if c >= k {
                return Err(LabelModelError::DimensionMismatch(format!(
                    "vote for class {c} in a {k}-class model"
                )));
            }
            let row = self.theta_row(j);
            for (y, sy) in s.iter_mut().enumerate() {
                *sy += if y == c { row[y] } else { -row[y] * off };
            }
        }
        Ok(s)
    }

    /// `log Z[j][k]` and its derivative with respect to `theta[j][k]`.
    fn log_partition(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.n_classes as f64;
        let off = 1.0 / (k - 1.0);
        let mut log_z = Vec::with_capacity(self.theta.len());
        let mut dlog_z = Vec::with_capacity(self.theta.len());
        for (i, &t) in self.theta.iter().enumerate() {
            // log(e^alpha + e^t + (K-1) e^{-t/(K-1)})
            let alpha = self.abstain_logit[i / self.n_classes];
            let terms = [alpha, t, (k - 1.0).ln() - t * off];
            let lz = log_sum_exp(&terms);
            log_z.push(lz);
            dlog_z.push((t - lz).exp() - ((-t * off) - lz).exp());
        }
        (log_z, dlog_z)
    }
}

/// Linear softmax classifier over the fixed feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    n_classes: usize,
    dim: usize,
    /// Row-major `n_classes x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FeatureParams {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn from_parts(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let n_classes = bias.len();
        let dim = weights.first().map_or(0, Vec::len);
        if weights.len() != n_classes || weights.iter().any(|r| r.len() != dim) {
            return Err(LabelModelError::DimensionMismatch(
                "weights must be n_classes x dim".into(),
            ));
        }
        Ok(Self {
            n_classes,
            dim,
            weights: weights.into_iter().flatten().collect(),
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(LabelModelError::DimensionMismatch(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok((0..self.n_classes)
            .map(|c| {
                self.bias[c]
                    + self
                        .weights_row(c)
                        .iter()
                        .zip(x)
                        .map(|(w, xi)| w * xi)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// Trained state of the joint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModelParams {
    pub lf_ids: Vec<String>,
    pub graphical: GraphicalParams,
    pub feature: FeatureParams,
    pub config: TrainingConfig,
    pub loss_trace: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the largest entry; exact ties resolve to `prefer` when it is
/// among the maxima, otherwise to the lowest index.
fn argmax_prefer(p: &[f64], prefer: usize) -> usize {
    let best = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if p.get(prefer) == Some(&best) {
        return prefer;
    }
    p.iter().position(|&x| x == best).unwrap_or(prefer)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lexical and spatial features of one token:
/// `[center x, center y, all caps, digit string, contains digit,
///   len/20 capped at 1, first char uppercase, one-hot(hash(lowercase) % 64)]`.
pub fn featurize(token: &Token, _doc: &Document) -> Vec<f64> {
    featurize_token(token)
}

pub fn featurize_token(token: &Token) -> Vec<f64> {
    let t = token.text.as_str();
    let (cx, cy) = token.bbox.center();
    let has_alpha = t.chars().any(char::is_alphabetic);
    let all_caps = has_alpha && !t.chars().any(char::is_lowercase);
    let digit_string = !t.is_empty() && t.chars().all(|c| c.is_ascii_digit());
    let contains_digit = t.chars().any(|c| c.is_ascii_digit());
    let len = (t.chars().count() as f64 / 20.0).min(1.0);
    let first_upper = t.chars().next().is_some_and(char::is_uppercase);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };

    let mut x = Vec::with_capacity(FEATURE_DIM);
    x.extend([
        cx,
        cy,
        flag(all_caps),
        flag(digit_string),
        flag(contains_digit),
        len,
        flag(first_upper),
    ]);
    x.resize(FEATURE_DIM, 0.0);
    let bucket = (fnv1a(t.to_lowercase().as_bytes()) % HASH_BUCKETS as u64) as usize;
    x[7 + bucket] = 1.0;
    x
}

/// Feature vectors for every token of a document.
pub fn featurize_document(doc: &Document) -> Vec<Vec<f64>> {
    doc.tokens().iter().map(featurize_token).collect()
}

/// `P(y | votes)` under the graphical model.
pub fn graphical_posterior(g: &GraphicalParams, votes: &[Vote]) -> Result<Vec<f64>> {
    Ok(softmax(&g.scores(votes)?))
}

/// `softmax(W x + b)`.
pub fn feature_posterior(f: &FeatureParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&f.logits(x)?))
}

/// Gradient of the training loss, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta: Vec<f64>,
    pub class_prior: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LabelModelParams {
    /// Initial state: zero potentials and priors, feature weights drawn from
    /// `U(-0.01, 0.01)` with the configured seed.
    pub fn init(lf_ids: Vec<String>, n_classes: usize, dim: usize, config: TrainingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(lf_ids, n_classes, dim, config, &mut rng)
    }

    fn init_with_rng(
        lf_ids: Vec<String>,
        n_classes: usize,
        dim: usize,
        config: TrainingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut feature = FeatureParams::zeros(n_classes, dim);
        for w in &mut feature.weights {
            *w = rng.random_range(-0.01..0.01);
        }
        Self {
            graphical: GraphicalParams::zeros(lf_ids.len(), n_classes),
            lf_ids,
            feature,
            config,
            loss_trace: Vec::new(),
        }
    }

    /// Concatenation `[theta, class_prior, weights, bias]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.graphical.theta.clone();
        v.extend(&self.graphical.class_prior);
        v.extend(&self.feature.weights);
        v.extend(&self.feature.bias);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for p in self
            .graphical
            .theta
            .iter_mut()
            .chain(self.graphical.class_prior.iter_mut())
            .chain(self.feature.weights.iter_mut())
            .chain(self.feature.bias.iter_mut())
        {
            *p = it.next().expect("flat parameter vector too short");
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let blob = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        serde_json::to_vec_pretty(&blob).expect("checkpoint serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let blob: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| LabelModelError::Format(e.to_string()))?;
        if blob.format != CHECKPOINT_FORMAT || blob.version != CHECKPOINT_VERSION {
            return Err(LabelModelError::Format(format!(
                "unsupported checkpoint {} v{}",
                blob.format, blob.version
            )));
        }
        let p = blob.params;
        let g = &p.graphical;
        let f = &p.feature;
        let shapes_ok = g.theta.len() == g.n_lfs * g.n_classes
            && g.class_prior.len() == g.n_classes
            && g.abstain_logit.len() == g.n_lfs
            && g.n_lfs == p.lf_ids.len()
            && f.weights.len() == f.n_classes * f.dim
            && f.bias.len() == f.n_classes
            && f.n_classes == g.n_classes;
        if !shapes_ok {
            return Err(LabelModelError::Format("inconsistent parameter shapes".into()));
        }
        if !p.flat_params().iter().chain(&g.abstain_logit).all(|v| v.is_finite()) {
            return Err(LabelModelError::Format("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: LabelModelParams,
}

/// Mean loss over `rows` and, when `want_grad`, its gradient.
#[allow(clippy::needless_range_loop)]
fn loss_and_grad(
    params: &LabelModelParams,
    matrix: &LabelMatrix,
    features: &[Vec<f64>],
    rows: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    let g = &params.graphical;
    let f = &params.feature;
    let k = g.n_classes;
    let off = 1.0 / (k as f64 - 1.0);
    let kl_weight = params.config.kl_weight;

    let (log_z, dlog_z) = g.log_partition();
    // b[k] = prior[k] + sum_j log Z[j][k], shared by every unlabeled row
    let b: Vec<f64> = (0..k)
        .map(|c| g.class_prior[c] + (0..g.n_lfs).map(|j| log_z[j * k + c]).sum::<f64>())
        .collect();
    let lse_b = log_sum_exp(&b);
    let q = softmax(&b);

    let mut grad = want_grad.then(|| Gradient {
        theta: vec![0.0; g.theta.len()],
        class_prior: vec![0.0; k],
        weights: vec![0.0; f.weights.len()],
        bias: vec![0.0; k],
    });
    let mut sum_db = vec![0.0; k];
    let mut total = 0.0;
    let mut da = vec![0.0; k];
    let mut dz = vec![0.0; k];

    for &r in rows {
        let votes = matrix.row(r);
        let x = &features[r];
        let a = g.scores(votes)?;
        let log_g = log_softmax(&a);
        let post_g: Vec<f64> = log_g.iter().map(|v| v.exp()).collect();

        match matrix.gold()[r] {
            Some(y) => {
                let y = y.index();
                if y >= k {
                    return Err(LabelModelError::DimensionMismatch(format!(
                        "gold class {y} in a {k}-class model"
                    )));
                }
                let log_f = log_softmax(&f.logits(x)?);
                total += -log_g[y] - log_f[y];
                if grad.is_some() {
                    for c in 0..k {
                        let e = if c == y { 1.0 } else { 0.0 };
                        da[c] = post_g[c] - e;
                        dz[c] = log_f[c].exp() - e;
                    }
                }
            }
            None => {
                let abstain_mass: f64 = votes
                    .iter()
                    .zip(&g.abstain_logit)
                    .filter(|(v, _)| v.is_abstain())
                    .map(|(_, a)| a)
                    .sum();
                let nll = -(log_sum_exp(&a) + abstain_mass - lse_b);
                let mut kl = 0.0;
                let log_f = if kl_weight > 0.0 {
                    let lf = log_softmax(&f.logits(x)?);
                    kl = post_g
                        .iter()
                        .zip(log_g.iter().zip(&lf))
                        .map(|(p, (lg, lf))| p * (lg - lf))
                        .sum::<f64>();
                    Some(lf)
                } else {
                    None
                };
                total += nll + kl_weight * kl;
                if grad.is_some() {
                    for c in 0..k {
                        da[c] = -post_g[c];
                        dz[c] = 0.0;
                        sum_db[c] += q[c];
                    }
                    if let Some(lf) = &log_f {
                        for c in 0..k {
                            da[c] += kl_weight * post_g[c] * (log_g[c] - lf[c] - kl);
                            dz[c] = kl_weight * (lf[c].exp() - post_g[c]);
                        }
                    }
                }
            }
        }

        if let Some(gr) = grad.as_mut() {
            for c in 0..k {
                gr.class_prior[c] += da[c];
            }
            for (j, v) in votes.iter().enumerate() {
                let Vote::Class(vc) = v else { continue };
                let vc = vc.index();
                for c in 0..k {
                    let coef = if c == vc { 1.0 } else { -off };
                    gr.theta[j * k + c] += da[c] * coef;
                }
            }
            if dz.iter().any(|&d| d != 0.0) {
                for c in 0..k {
                    gr.bias[c] += dz[c];
                    let row = &mut gr.weights[c * f.dim..(c + 1) * f.dim];
                    for (w, xi) in row.iter_mut().zip(x) {
                        *w += dz[c] * xi;
                    }
                }
            }
        }
    }

    let n = rows.len().max(1) as f64;
    let grad = grad.map(|mut gr| {
        for c in 0..k {
            gr.class_prior[c] += sum_db[c];
            for j in 0..g.n_lfs {
                gr.theta[j * k + c] += sum_db[c] * dlog_z[j * k + c];
            }
        }
        for v in gr
            .theta
            .iter_mut()
            .chain(gr.class_prior.iter_mut())
            .chain(gr.weights.iter_mut())
            .chain(gr.bias.iter_mut())
        {
            *v /= n;
        }
        gr
    });
    Ok((total / n, grad))
}

fn check_alignment(params: &LabelModelParams, matrix: &LabelMatrix, features: &[Vec<f64>]) -> Result<()> {
    if features.len() != matrix.n_rows() {
        return Err(LabelModelError::DimensionMismatch(format!(
            "{} feature rows for {} matrix rows",
            features.len(),
            matrix.n_rows()
        )));
    }
    if matrix.n_lfs() != params.graphical.n_lfs {
        return Err(LabelModelError::DimensionMismatch(format!(
            "matrix has {} LFs, model has {}",
            matrix.n_lfs(),
            params.graphical.n_lfs
        )));
    }
    if let Some(x) = features.iter().find(|x| x.len() != params.feature.dim) {
        return Err(LabelModelError::DimensionMismatch(format!(
            "feature row of length {}, expected {}",
            x.len(),
            params.feature.dim
        )));
    }
    Ok(())
}

/// Mean training loss over all rows.
pub fn objective(params: &LabelModelParams, matrix: &LabelMatrix, features: &[Vec<f64>]) -> Result<f64> {
    check_alignment(params, matrix, features)?;
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    Ok(loss_and_grad(params, matrix, features, &rows, false)?.0)
}

/// Mean training loss over all rows and its analytic gradient.
pub fn objective_and_gradient(
    params: &LabelModelParams,
    matrix: &LabelMatrix,
    features: &[Vec<f64>],
) -> Result<(f64, Gradient)> {
    check_alignment(params, matrix, features)?;
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    let (loss, grad) = loss_and_grad(params, matrix, features, &rows, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend(&self.class_prior);
        v.extend(&self.weights);
        v.extend(&self.bias);
        v
    }
}

/// Decoupled-weight-decay Adam state for one parameter block.
struct AdamW {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step<'a>(&mut self, t: i32, params: impl Iterator<Item = &'a mut f64>, grads: &[f64]) {
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        for (i, p) in params.enumerate() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p *= 1.0 - self.lr * self.weight_decay;
            *p -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Trains the joint model over the four token classes.
pub fn train(matrix: &LabelMatrix, features: &[Vec<f64>], cfg: &TrainingConfig) -> Result<LabelModelParams> {
    train_with_classes(matrix, features, cfg, ClassLabel::COUNT)
}

/// Trains with an explicit class count; gold labels and votes must use class
/// indices below `n_classes`.
pub fn train_with_classes(
    matrix: &LabelMatrix,
    features: &[Vec<f64>],
    cfg: &TrainingConfig,
    n_classes: usize,
) -> Result<LabelModelParams> {
    cfg.validate()?;
    if matrix.n_rows() == 0 {
        return Err(LabelModelError::EmptyMatrix);
    }
    if n_classes < 2 {
        return Err(LabelModelError::DimensionMismatch("need at least two classes".into()));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params =
        LabelModelParams::init_with_rng(matrix.lf_ids().to_vec(), n_classes, dim, cfg.clone(), &mut rng);
    check_alignment(&params, matrix, features)?;
    params.graphical.fit_abstain_rates(matrix);

    let g_len = params.graphical.theta.len() + n_classes;
    let f_len = params.feature.weights.len() + n_classes;
    let mut opt_g = AdamW::new(g_len, cfg.lr_graphical, cfg.weight_decay);
    let mut opt_f = AdamW::new(f_len, cfg.lr_feature, cfg.weight_decay);

    let mut order: Vec<usize> = (0..matrix.n_rows()).collect();
    let mut t = 0i32;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = loss_and_grad(&params, matrix, features, batch, true)?;
            let grad = grad.expect("gradient requested");
            t += 1;
            let mut gg = grad.theta;
            gg.extend(&grad.class_prior);
            let mut fg = grad.weights;
            fg.extend(&grad.bias);
            let gp = &mut params.graphical;
            opt_g.step(t, gp.theta.iter_mut().chain(gp.class_prior.iter_mut()), &gg);
            let fp = &mut params.feature;
            opt_f.step(t, fp.weights.iter_mut().chain(fp.bias.iter_mut()), &fg);
        }
        let rows: Vec<usize> = (0..matrix.n_rows()).collect();
        let (loss, _) = loss_and_grad(&params, matrix, features, &rows, false)?;
        if !loss.is_finite() {
            return Err(LabelModelError::NonFiniteLoss { epoch });
        }
        tracing::debug!(epoch, loss, "label model epoch");
        params.loss_trace.push(loss);
    }
    Ok(params)
}

/// Per-token labels for `doc`. Tokens with at least one LF vote take the
/// graphical argmax; all-abstain tokens take the feature-model argmax. Ties
/// go to `Other`.
pub fn predict(params: &LabelModelParams, doc: &Document, lfs: &LfSet) -> Result<Vec<ClassLabel>> {
    if lfs.len() != params.graphical.n_lfs {
        return Err(LabelModelError::DimensionMismatch(format!(
            "LF set has {} functions, model was trained with {}",
            lfs.len(),
            params.graphical.n_lfs
        )));
    }
    if lfs.ids() != params.lf_ids {
        return Err(LabelModelError::DimensionMismatch(
            "LF ids differ from those used in training".into(),
        ));
    }
    if params.graphical.n_classes != ClassLabel::COUNT {
        return Err(LabelModelError::DimensionMismatch(format!(
            "model has {} classes, expected {}",
            params.graphical.n_classes,
            ClassLabel::COUNT
        )));
    }
    let other = ClassLabel::Other.index();
    lfs.vote_rows(doc)
        .iter()
        .zip(doc.tokens())
        .map(|(votes, token)| {
            let p = if votes.iter().all(|v| v.is_abstain()) {
                feature_posterior(&params.feature, &featurize_token(token))?
            } else {
                graphical_posterior(&params.graphical, votes)?
            };
            Ok(ClassLabel::from_index(argmax_prefer(&p, other)).expect("class index in range"))
        })
        .collect()
}
