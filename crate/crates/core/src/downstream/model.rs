//! One-vs-rest L2-regularized logistic regression trained by full-batch
//! gradient descent with early stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{dot, SparseRow};
use super::metrics::{auroc, f1_scores};
use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, computed without overflow.
fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// labels x features
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub threshold: f64,
    /// Labels with a single class in training, predicted by a constant.
    pub degenerate: Vec<bool>,
}

impl LinearModel {
    pub fn zeros(labels: usize, features: usize, l2: f64) -> Self {
        LinearModel {
            weights: vec![vec![0.0; features]; labels],
            bias: vec![0.0; labels],
            l2,
            threshold: 0.5,
            degenerate: vec![false; labels],
        }
    }

    pub fn n_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, row: &SparseRow) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(row, w) + b)
            .collect()
    }

    pub fn predict_proba(&self, rows: &[SparseRow]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| self.logits(r).into_iter().map(sigmoid).collect())
            .collect()
    }

    pub fn predict(&self, rows: &[SparseRow]) -> Vec<Vec<u8>> {
        binarize(&self.predict_proba(rows), self.threshold)
    }

    /// Sum over labels of the mean binary cross-entropy, plus
    /// `l2 / 2 * ||W||^2` (bias unregularized).
    pub fn loss(&self, x: &[SparseRow], y: &[Vec<u8>]) -> f64 {
        let n = x.len() as f64;
        let mut data = 0.0;
        for (row, labels) in x.iter().zip(y) {
            for (z, &t) in self.logits(row).into_iter().zip(labels) {
                data += bce_logit(z, t as f64);
            }
        }
        let penalty: f64 = self.weights.iter().flatten().map(|w| w * w).sum();
        data / n + 0.5 * self.l2 * penalty
    }

    /// Gradient of [`loss`](Self::loss) with respect to weights and bias.
    pub fn gradient(&self, x: &[SparseRow], y: &[Vec<u8>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = x.len() as f64;
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| w.iter().map(|v| self.l2 * v).collect()).collect();
        let mut gb = vec![0.0; self.n_labels()];
        for (row, labels) in x.iter().zip(y) {
            for (l, z) in self.logits(row).into_iter().enumerate() {
                let r = (sigmoid(z) - labels[l] as f64) / n;
                gb[l] += r;
                for &(j, v) in row {
                    gw[l][j] += r * v;
                }
            }
        }
        (gw, gb)
    }
}

pub fn binarize(probs: &[Vec<f64>], threshold: f64) -> Vec<Vec<u8>> {
    probs
        .iter()
        .map(|p| p.iter().map(|&v| u8::from(v >= threshold)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    /// AUROC of the first label column.
    Auroc,
    MicroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l2: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Half-width of the uniform initial weights.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-4,
            lr: 2.0,
            max_epochs: 300,
            patience: 3,
            val_fraction: 0.2,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be finite and >= 0, got {}", self.l2)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: LinearModel,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub val_history: Vec<f64>,
    pub degenerate_labels: Vec<usize>,
}

fn val_score(model: &LinearModel, x: &[SparseRow], y: &[Vec<u8>], metric: ValMetric) -> (Option<f64>, f64) {
    let loss = model.loss(x, y);
    let score = match metric {
        ValMetric::Auroc => {
            let probs = model.predict_proba(x);
            let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let l: Vec<bool> = y.iter().map(|r| r[0] != 0).collect();
            auroc(&s, &l).ok()
        }
        ValMetric::MicroF1 => f1_scores(&model.predict(x), y).ok().map(|(m, _)| m),
    };
    (score, loss)
}

/// Trains on `(x, y)` and keeps the parameters from the epoch with the best
/// validation metric; ties (and an undefined metric) fall back to lower
/// validation loss. Stops after `patience` epochs without improvement.
pub fn train(
    x: &[SparseRow],
    y: &[Vec<u8>],
    x_val: &[SparseRow],
    y_val: &[Vec<u8>],
    n_features: usize,
    metric: ValMetric,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidInput(format!("{} training rows for {} label rows", x.len(), y.len())));
    }
    if x_val.is_empty() || x_val.len() != y_val.len() {
        return Err(Error::InvalidInput("empty or misaligned validation split".into()));
    }
    let n_labels = y[0].len();
    let mut model = LinearModel::zeros(n_labels, n_features, cfg.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in model.weights.iter_mut().flatten() {
        *w = rng.random_range(-cfg.init_scale..=cfg.init_scale);
    }
    let mut degenerate_labels = Vec::new();
    for l in 0..n_labels {
        let pos = y.iter().filter(|r| r[l] != 0).count();
        if pos == 0 || pos == y.len() {
            let rate = (pos as f64 / y.len() as f64).clamp(1e-4, 1.0 - 1e-4);
            model.weights[l].iter_mut().for_each(|w| *w = 0.0);
            model.bias[l] = (rate / (1.0 - rate)).ln();
            model.degenerate[l] = true;
            degenerate_labels.push(l);
        }
    }
    if !degenerate_labels.is_empty() {
        log::debug!("{} label(s) have a single class in training", degenerate_labels.len());
    }

    let better = |a: (Option<f64>, f64), b: (Option<f64>, f64)| match (a.0, b.0) {
        (Some(x), Some(y)) if (x - y).abs() > 1e-12 => x > y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => a.1 < b.1 - 1e-12,
    };
    // The untrained initialization is not a candidate: near 0.5 everywhere it
    // predicts every label positive, which can out-score early epochs.
    let mut best = model.clone();
    let mut best_score = (None, f64::INFINITY);
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let (gw, gb) = model.gradient(x, y);
        for l in 0..n_labels {
            if model.degenerate[l] {
                continue;
            }
            for (w, g) in model.weights[l].iter_mut().zip(&gw[l]) {
                *w -= cfg.lr * g;
            }
            model.bias[l] -= cfg.lr * gb[l];
        }
        let loss = model.loss(x, y);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("training loss became {loss} at epoch {epoch}; lower lr")));
        }
        let score = val_score(&model, x_val, y_val, metric);
        history.push(score.0.unwrap_or(f64::NAN));
        if epoch == 1 || better(score, best_score) {
            best = model.clone();
            best_score = score;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        epochs_run,
        best_epoch,
        best_val: best_score.0.unwrap_or(f64::NAN),
        val_history: history,
        degenerate_labels,
    })
}

/// Global threshold from {0.05, 0.10, ..., 0.95} maximizing micro-F1 on
/// validation predictions; ties go to the value closest to 0.5.
pub fn tune_threshold(probs: &[Vec<f64>], y: &[Vec<u8>]) -> f64 {
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for k in 1..=19 {
        let t = k as f64 * 0.05;
        let Ok((micro, _)) = f1_scores(&binarize(probs, t), y) else { continue };
        let closer = (t - 0.5).abs() < (best.1 - 0.5).abs();
        if micro > best.0 + 1e-12 || ((micro - best.0).abs() <= 1e-12 && closer) {
            best = (micro, t);
        }
    }
    best.1
}
