//! Ranking and classification metrics and percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("ranking metric needs both classes".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the rank statistic, ties at mid-rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve (average precision), with
/// tied scores entering together.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_matrix(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction rows for {} label rows",
            pred.len(),
            truth.len()
        )));
    }
    let width = truth.first().map_or(0, Vec::len);
    if pred.iter().chain(truth).any(|r| r.len() != width) {
        return Err(Error::InvalidInput("label space mismatch between rows".into()));
    }
    Ok(width)
}

/// Micro and macro F1 over the given label columns (all columns if `None`).
/// A label with no true and no predicted instances has F1 = 0 and still
/// counts toward the macro average.
pub fn f1_scores_on(pred: &[Vec<u8>], truth: &[Vec<u8>], columns: Option<&[usize]>) -> Result<(f64, f64)> {
    let width = check_matrix(pred, truth)?;
    let all: Vec<usize> = (0..width).collect();
    let cols = columns.unwrap_or(&all);
    if let Some(&c) = cols.iter().find(|&&c| c >= width) {
        return Err(Error::InvalidInput(format!("label column {c} outside width {width}")));
    }
    if cols.is_empty() {
        return Err(Error::Undefined("F1 over zero labels".into()));
    }
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut macro_sum = 0.0;
    for &c in cols {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in pred.iter().zip(truth) {
            match (p[c] != 0, t[c] != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        macro_sum += f1_from(tp, fp, fn_);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    Ok((f1_from(tp_all, fp_all, fn_all), macro_sum / cols.len() as f64))
}

pub fn f1_scores(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<(f64, f64)> {
    f1_scores_on(pred, truth, None)
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub replicates: usize,
    /// Replicates on which the metric was undefined (e.g. one class only).
    pub skipped: usize,
}

/// Linear-interpolated percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples `0..n` with replacement `n_boot` times and evaluates `metric`
/// on each resample. Undefined replicates are skipped and counted; the
/// interval is the 2.5th/97.5th percentile, widened if needed so that it
/// contains the point estimate.
pub fn bootstrap_ci(
    n: usize,
    n_boot: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Result<f64>,
) -> Result<Interval> {
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let all: Vec<usize> = (0..n).collect();
    let point = defined(metric(&all))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut skipped = 0;
    let mut idx = vec![0usize; n];
    for _ in 0..n_boot {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n.max(1));
        }
        match defined(metric(&idx))? {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("bootstrap skipped {skipped} of {n_boot} replicates with undefined metric");
    }
    let (mut lo, mut hi) = (None, None);
    if let (Some(p), false) = (point, values.is_empty()) {
        values.sort_by(f64::total_cmp);
        lo = Some(percentile(&values, 0.025).min(p));
        hi = Some(percentile(&values, 0.975).max(p));
    }
    Ok(Interval {
        point,
        lo,
        hi,
        replicates: n_boot,
        skipped,
    })
}
