//! Frozen-feature evaluation: cosine k-NN, a softmax linear probe, and
//! collapse diagnostics (per-dimension spread and effective rank).
//!
//! Features are `D × N` matrices with one sample per column.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Knn,
    Linear,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "knn" => Some(Self::Knn),
            "linear" => Some(Self::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Standardize each feature with train-set mean/std before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub correct: usize,
    pub num_test: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe: Option<ProbeConfig>,
}

impl EvalReport {
    fn new(protocol: Protocol, predictions: &[usize], truth: &[usize]) -> Self {
        let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
        Self {
            protocol,
            accuracy: correct as f64 / truth.len() as f64,
            correct,
            num_test: truth.len(),
            k: None,
            probe: None,
        }
    }
}

fn check_split(feats: &DenseMatrix, labels: &[usize], which: &str) -> Result<()> {
    if feats.cols() == 0 {
        return Err(Error::Contract(format!("{which} set is empty")));
    }
    if labels.len() != feats.cols() {
        return Err(Error::dim(
            "eval",
            format!("{which}: {} labels for {} samples", labels.len(), feats.cols()),
        ));
    }
    Ok(())
}

fn unit_columns(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.cols())
        .map(|j| {
            let c = m.column(j);
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                c.iter().map(|v| v / n).collect()
            } else {
                c
            }
        })
        .collect()
}

/// Cosine-similarity k-NN with majority vote. Equal similarities keep the
/// lower train index; equal vote counts go to the smaller label.
pub fn knn_predict(
    train_feats: &DenseMatrix,
    train_labels: &[usize],
    test_feats: &DenseMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    check_split(train_feats, train_labels, "train")?;
    if test_feats.cols() == 0 {
        return Err(Error::Contract("test set is empty".into()));
    }
    if train_feats.rows() != test_feats.rows() {
        return Err(Error::dim(
            "knn_eval",
            format!("train dim {} vs test dim {}", train_feats.rows(), test_feats.rows()),
        ));
    }
    if k == 0 || k > train_feats.cols() {
        return Err(Error::Contract(format!(
            "k must be in [1, {}], got {k}",
            train_feats.cols()
        )));
    }
    let train = unit_columns(train_feats);
    let test = unit_columns(test_feats);
    let num_labels = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut preds = Vec::with_capacity(test.len());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for q in &test {
        sims.clear();
        sims.extend(
            train
                .iter()
                .enumerate()
                .map(|(i, t)| (t.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i)),
        );
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_labels];
        for &(_, i) in &sims[..k] {
            votes[train_labels[i]] += 1;
        }
        let best = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(l, _)| l)
            .unwrap_or(0);
        preds.push(best);
    }
    Ok(preds)
}

pub fn knn_eval(
    train_feats: &DenseMatrix,
    train_labels: &[usize],
    test_feats: &DenseMatrix,
    test_labels: &[usize],
    k: usize,
) -> Result<EvalReport> {
    check_split(test_feats, test_labels, "test")?;
    let preds = knn_predict(train_feats, train_labels, test_feats, k)?;
    let mut r = EvalReport::new(Protocol::Knn, &preds, test_labels);
    r.k = Some(k);
    Ok(r)
}

/// Multinomial logistic regression fitted by full-batch gradient descent
/// with a cosine-decayed step size.
pub fn linear_probe(
    train_feats: &DenseMatrix,
    train_labels: &[usize],
    test_feats: &DenseMatrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    check_split(train_feats, train_labels, "train")?;
    check_split(test_feats, test_labels, "test")?;
    if !train_feats.is_finite() || !test_feats.is_finite() {
        return Err(Error::Numeric("linear probe received non-finite features".into()));
    }
    if train_feats.rows() != test_feats.rows() {
        return Err(Error::dim(
            "linear_probe",
            format!("train dim {} vs test dim {}", train_feats.rows(), test_feats.rows()),
        ));
    }
    let d = train_feats.rows();
    let n = train_feats.cols();
    let k = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);

    let (shift, inv_scale) = if cfg.standardize {
        let mut shift = vec![0.0; d];
        let mut inv = vec![1.0; d];
        for i in 0..d {
            let row = train_feats.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            shift[i] = mu;
            inv[i] = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
        (shift, inv)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let prep = |m: &DenseMatrix| DenseMatrix::from_fn(d, m.cols(), |i, j| (m.get(i, j) - shift[i]) * inv_scale[i]);
    let xtr = prep(train_feats);
    let xte = prep(test_feats);

    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; k];
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for j in 0..n {
            softmax_logits(&w, &b, &xtr, j, &mut logits);
            logits[train_labels[j]] -= 1.0;
            for c in 0..k {
                let r = logits[c];
                gb[c] += r;
                for i in 0..d {
                    gw[c * d + i] += r * xtr.get(i, j);
                }
            }
        }
        let s = lr / n as f64;
        for (p, g) in w.iter_mut().zip(&gw) {
            *p -= s * g;
        }
        for (p, g) in b.iter_mut().zip(&gb) {
            *p -= s * g;
        }
    }
    let preds: Vec<usize> = (0..xte.cols())
        .map(|j| {
            softmax_logits(&w, &b, &xte, j, &mut logits);
            argmax(&logits)
        })
        .collect();
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("linear probe weights diverged".into()));
    }
    let mut r = EvalReport::new(Protocol::Linear, &preds, test_labels);
    r.probe = Some(*cfg);
    Ok(r)
}

/// Writes softmax probabilities of sample `j` into `out`.
fn softmax_logits(w: &[f64], b: &[f64], x: &DenseMatrix, j: usize, out: &mut [f64]) {
    let d = x.rows();
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + (0..d).map(|i| w[c * d + i] * x.get(i, j)).sum::<f64>();
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub per_dim_std: Vec<f64>,
    pub mean_std: f64,
    pub effective_rank: f64,
}

/// Population std per feature and `exp(H(p))` with `p` the normalized
/// singular values of the centered features. Fully collapsed features
/// report rank 1.
pub fn collapse_metrics(feats: &DenseMatrix) -> Result<CollapseReport> {
    let (d, n) = feats.shape();
    if n < 2 {
        return Err(Error::Contract(format!("collapse metrics need N >= 2, got {n}")));
    }
    let means = feats.row_means();
    let centered = feats.sub_column(&means);
    let per_dim_std: Vec<f64> = (0..d)
        .map(|i| (centered.row(i).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt())
        .collect();
    let mean_std = per_dim_std.iter().sum::<f64>() / d as f64;
    Ok(CollapseReport {
        per_dim_std,
        mean_std,
        effective_rank: effective_rank_centered(&centered)?,
    })
}

/// Effective rank of an already-centered matrix.
pub fn effective_rank_centered(x: &DenseMatrix) -> Result<f64> {
    let gram = if x.rows() <= x.cols() {
        x.matmul(&x.transpose())?
    } else {
        x.transpose().matmul(x)?
    };
    let eig = symmetric_eigenvalues(&gram);
    // Eigenvalues at roundoff level are exact zeros of a rank-deficient
    // Gram matrix; their square roots would otherwise leak into the entropy.
    let lmax = eig.iter().cloned().fold(0.0, f64::max);
    let cutoff = lmax * f64::EPSILON * gram.rows() as f64;
    let sv: Vec<f64> = eig
        .into_iter()
        .map(|l| if l > cutoff { l.sqrt() } else { 0.0 })
        .collect();
    let total: f64 = sv.iter().sum();
    let floor = 1e-12 * x.max_abs().max(1.0) * (x.cols() as f64).sqrt();
    if total <= floor {
        return Ok(1.0);
    }
    let h: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<f64> = a.data().to_vec();
    let at = |m: &[f64], i: usize, j: usize| m[i * n + j];
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += at(&m, i, j).powi(2);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = at(&m, p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = at(&m, p, p);
                let aqq = at(&m, q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| at(&m, i, i)).collect()
}

/// Embeds a labeled split with a frozen encoder snapshot.
pub fn embed_dataset(encoder: &EncoderState, data: &Dataset) -> Result<DenseMatrix> {
    encoder.embed(&data.features)
}

/// Per-epoch hook the trainer calls with a snapshot of the online encoder.
/// Implementations own whatever labeled data they need; the trainer never
/// sees it.
pub trait EpochMonitor {
    fn evaluate(&mut self, encoder: &EncoderState) -> Result<f64>;
}

/// k-NN accuracy of the encoder output on a fixed train/test split.
#[derive(Debug, Clone)]
pub struct KnnMonitor {
    pub train: Dataset,
    pub test: Dataset,
    pub k: usize,
}

impl EpochMonitor for KnnMonitor {
    fn evaluate(&mut self, encoder: &EncoderState) -> Result<f64> {
        let tr = embed_dataset(encoder, &self.train)?;
        let te = embed_dataset(encoder, &self.test)?;
        Ok(knn_eval(&tr, &self.train.labels, &te, &self.test.labels, self.k)?.accuracy)
    }
}
